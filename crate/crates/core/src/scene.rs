//! Camera model, point maps and the projection operator.
//!
//! Conventions used throughout the crate:
//! - extrinsics map world to camera, `x_cam = R(q) * x_world + t`;
//! - quaternions are Hamilton, stored `(w, x, y, z)`;
//! - pixel centers sit at integer coordinates, `u` is the column and `v` the
//!   row, origin at the top-left corner.

use nalgebra::{Matrix3, Matrix3x4, Quaternion, UnitQuaternion, Vector3};

use crate::error::GeomError;
use crate::scalar::{lit, to_f64, Real};

/// Pinhole intrinsics `[fx, fy, cx, cy]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Self {
        Self { fx, fy, cx, cy }
    }

    pub fn matrix(&self) -> Matrix3<T> {
        let (z, o) = (T::zero(), T::one());
        Matrix3::new(self.fx, z, self.cx, z, self.fy, self.cy, z, z, o)
    }

    pub fn as_array(&self) -> [T; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    pub fn from_array(f: [T; 4]) -> Self {
        Self::new(f[0], f[1], f[2], f[3])
    }
}

/// A camera: world-to-camera rotation and translation plus intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams<T: Real> {
    pub q: UnitQuaternion<T>,
    pub t: Vector3<T>,
    pub intrinsics: Intrinsics<T>,
}

impl<T: Real> CameraParams<T> {
    /// Builds a camera, renormalizing the quaternion.
    ///
    /// Returns an error when the focal lengths are not strictly positive or
    /// the quaternion has (near) zero norm.
    pub fn new(q: Quaternion<T>, t: Vector3<T>, intrinsics: Intrinsics<T>) -> Result<Self, GeomError> {
        if !(intrinsics.fx > T::zero() && intrinsics.fy > T::zero()) {
            return Err(GeomError::InvalidArgument(format!(
                "focal lengths must be positive (fx={}, fy={})",
                intrinsics.fx, intrinsics.fy
            )));
        }
        if q.norm() < lit(1e-12) {
            return Err(GeomError::InvalidArgument("zero quaternion".into()));
        }
        Ok(Self {
            q: UnitQuaternion::new_normalize(q),
            t,
            intrinsics,
        })
    }

    pub fn identity(intrinsics: Intrinsics<T>) -> Self {
        Self {
            q: UnitQuaternion::identity(),
            t: Vector3::zeros(),
            intrinsics,
        }
    }

    pub fn rotation(&self) -> Matrix3<T> {
        self.q.to_rotation_matrix().into_inner()
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<T> {
        -(self.q.inverse() * self.t)
    }

    /// Transforms a world point into the camera frame.
    pub fn to_camera(&self, x: &Vector3<T>) -> Vector3<T> {
        self.q * x + self.t
    }

    /// The 3x4 projection matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<T> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        self.intrinsics.matrix() * rt
    }
}

/// Sub-pixel image coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord<T: Real> {
    pub u: T,
    pub v: T,
}

impl<T: Real> PixelCoord<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }

    /// Nearest integer pixel `(u, v)` if it lies inside a `width x height` grid.
    pub fn round_in_bounds(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let u = to_f64(self.u).round();
        let v = to_f64(self.v).round();
        if u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64 {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }

    pub fn dist(&self, other: &Self) -> T {
        let du = self.u - other.u;
        let dv = self.v - other.v;
        (du * du + dv * dv).sqrt()
    }
}

/// Rotates `x` by the unit quaternion `q`.
pub fn rotate<T: Real>(q: &UnitQuaternion<T>, x: &Vector3<T>) -> Vector3<T> {
    q * x
}

/// Projects a world point into the image of `g`.
pub fn project<T: Real>(g: &CameraParams<T>, x: &Vector3<T>) -> Result<PixelCoord<T>, GeomError> {
    let xc = g.to_camera(x);
    if !(xc.z > T::zero()) {
        return Err(GeomError::Cheirality { depth: to_f64(xc.z) });
    }
    let k = &g.intrinsics;
    Ok(PixelCoord::new(
        k.fx * xc.x / xc.z + k.cx,
        k.fy * xc.y / xc.z + k.cy,
    ))
}

/// Back-projects a pixel at camera depth `depth` into the world frame.
pub fn unproject<T: Real>(g: &CameraParams<T>, pix: &PixelCoord<T>, depth: T) -> Vector3<T> {
    let k = &g.intrinsics;
    let ray = Vector3::new((pix.u - k.cx) / k.fx, (pix.v - k.cy) / k.fy, T::one());
    g.q.inverse() * (ray * depth - g.t)
}

/// Per-view dense point maps in a shared world frame.
///
/// Storage is view-major then row-major: the flat index of `(view, v, u)` is
/// `(view * height + v) * width + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMapSet<T: Real> {
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub points: Vec<Vector3<T>>,
    pub confidence: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Real> PointMapSet<T> {
    /// All-invalid map with zero points and unit confidence.
    pub fn empty(n_views: usize, height: usize, width: usize) -> Self {
        let n = n_views * height * width;
        Self {
            n_views,
            height,
            width,
            points: vec![Vector3::zeros(); n],
            confidence: vec![T::one(); n],
            valid: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn index(&self, view: usize, v: usize, u: usize) -> usize {
        (view * self.height + v) * self.width + u
    }

    /// Inverse of [`PointMapSet::index`]: `(view, v, u)`.
    #[inline]
    pub fn unflatten(&self, idx: usize) -> (usize, usize, usize) {
        let per_view = self.height * self.width;
        let view = idx / per_view;
        let rem = idx % per_view;
        (view, rem / self.width, rem % self.width)
    }

    pub fn same_shape<S: Real>(&self, other: &PointMapSet<S>) -> bool {
        self.n_views == other.n_views && self.height == other.height && self.width == other.width
    }

    /// Checks the structural invariants: consistent lengths, finite valid
    /// points and nonnegative confidence.
    pub fn validate(&self) -> Result<(), GeomError> {
        let n = self.n_views * self.height * self.width;
        if self.points.len() != n || self.confidence.len() != n || self.valid.len() != n {
            return Err(GeomError::DimensionMismatch(format!(
                "point map buffers do not match {}x{}x{}",
                self.n_views, self.height, self.width
            )));
        }
        for i in 0..n {
            if self.valid[i] && !self.points[i].iter().all(|c| c.is_finite()) {
                return Err(GeomError::InvalidArgument(format!("non-finite valid point at {i}")));
            }
            if !(self.confidence[i] >= T::zero()) {
                return Err(GeomError::InvalidArgument(format!("negative confidence at {i}")));
            }
        }
        Ok(())
    }

    /// Indices of all valid pixels, in storage order.
    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }
}
