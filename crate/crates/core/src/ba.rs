//! Sparse bundle adjustment over cameras and anchor points.
//!
//! Levenberg-Marquardt on `sum_j sum_{i in V_j} rho(|pi(g_i, x_j) - u_ij|^2)`
//! with the robust loss handled by iterative reweighting. Points are
//! eliminated with a Schur complement so the dense linear solve only covers
//! camera parameters.
//!
//! Camera parameters are `[w (3), t (3), fx, fy, cx, cy]` where `w` is a
//! rotation increment applied on the left of the current quaternion,
//! `q <- exp(w) * q`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::GeomError;
use crate::matching::Track;
use crate::scalar::{lit, to_f64, Real};
use crate::scene::{project, CameraParams, Intrinsics, PixelCoord};

/// Residual magnitude (pixels) substituted for observations behind the camera.
pub const CHEIRALITY_CAP: f64 = 1e3;

pub const CAMERA_DOF: usize = 10;

type Jac2x10<T> = SMatrix<T, 2, CAMERA_DOF>;

/// `project(g, x) - obs`; a capped constant residual when `x` is behind `g`.
pub fn residual<T: Real>(g: &CameraParams<T>, x: &Vector3<T>, obs: &PixelCoord<T>) -> Vector2<T> {
    match project(g, x) {
        Ok(p) => Vector2::new(p.u - obs.u, p.v - obs.v),
        Err(_) => {
            let c: T = lit(CHEIRALITY_CAP / std::f64::consts::SQRT_2);
            Vector2::new(c, c)
        }
    }
}

/// Cauchy loss `s^2 log(1 + r2 / s^2)` of a squared residual.
pub fn cauchy<T: Real>(r2: T, scale: T) -> T {
    let s2 = scale * scale;
    s2 * (r2 / s2).ln_1p()
}

/// Loss applied to squared residual norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLoss {
    Cauchy { scale: f64 },
    /// Plain least squares.
    Squared,
}

impl RobustLoss {
    /// `(rho(r2), rho'(r2))`.
    fn eval<T: Real>(&self, r2: T) -> (T, T) {
        match *self {
            RobustLoss::Cauchy { scale } => {
                let s: T = lit(scale);
                (cauchy(r2, s), T::one() / (T::one() + r2 / (s * s)))
            }
            RobustLoss::Squared => (r2, T::one()),
        }
    }
}

/// Analytic derivatives of the projection of `x` into `g`: the pixel, the
/// 2x10 Jacobian with respect to the camera parameters and the 2x3 Jacobian
/// with respect to the point. `None` when the point is behind the camera.
pub fn projection_jacobians<T: Real>(
    g: &CameraParams<T>,
    x: &Vector3<T>,
) -> Option<(PixelCoord<T>, Jac2x10<T>, Matrix2x3<T>)> {
    let rx = g.q * x;
    let xc = rx + g.t;
    if !(xc.z > T::zero()) {
        return None;
    }
    let k = &g.intrinsics;
    let iz = T::one() / xc.z;
    let (a, b) = (xc.x * iz, xc.y * iz);
    let z = T::zero();
    let d_proj = Matrix2x3::new(k.fx * iz, z, -k.fx * a * iz, z, k.fy * iz, -k.fy * b * iz);
    // d(R x)/dw = -[R x]_x
    let skew = Matrix3::new(z, -rx.z, rx.y, rx.z, z, -rx.x, -rx.y, rx.x, z);
    let d_rot = d_proj * (-skew);
    let mut jc = Jac2x10::zeros();
    jc.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_rot);
    jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
    jc[(0, 6)] = a;
    jc[(1, 7)] = b;
    jc[(0, 8)] = T::one();
    jc[(1, 9)] = T::one();
    let jp = d_proj * g.rotation();
    Some((PixelCoord::new(k.fx * a + k.cx, k.fy * b + k.cy), jc, jp))
}

/// Applies a full 10-parameter increment to a camera.
pub fn apply_camera_step<T: Real>(g: &CameraParams<T>, d: &[T]) -> CameraParams<T> {
    let w = Vector3::new(d[0], d[1], d[2]);
    let q = if w.iter().all(|c| c.is_zero()) {
        g.q
    } else {
        UnitQuaternion::new_normalize((UnitQuaternion::from_scaled_axis(w) * g.q).into_inner())
    };
    CameraParams {
        q,
        t: g.t + Vector3::new(d[3], d[4], d[5]),
        intrinsics: Intrinsics::new(
            g.intrinsics.fx + d[6],
            g.intrinsics.fy + d[7],
            g.intrinsics.cx + d[8],
            g.intrinsics.cy + d[9],
        ),
    }
}

/// Which cameras pin down the similarity ambiguity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gauge {
    /// Camera whose pose is frozen.
    pub fixed_camera: usize,
    /// Camera whose distance to the fixed camera's center is frozen. When the
    /// fixed camera sits at the origin this is the norm of its translation.
    pub scale_camera: usize,
}

impl Default for Gauge {
    fn default() -> Self {
        Self {
            fixed_camera: 0,
            scale_camera: 1,
        }
    }
}

/// Cameras, initial anchor points and one track per point.
#[derive(Debug, Clone)]
pub struct BAProblem<T: Real> {
    pub cameras: Vec<CameraParams<T>>,
    pub points: Vec<Vector3<T>>,
    pub tracks: Vec<Track<T>>,
    pub loss: RobustLoss,
    pub fix_intrinsics: bool,
    pub gauge: Gauge,
}

impl<T: Real> BAProblem<T> {
    pub fn new(cameras: Vec<CameraParams<T>>, points: Vec<Vector3<T>>, tracks: Vec<Track<T>>) -> Self {
        Self {
            cameras,
            points,
            tracks,
            loss: RobustLoss::Cauchy { scale: 1.0 },
            fix_intrinsics: false,
            gauge: Gauge::default(),
        }
    }

    fn validate(&self) -> Result<(), GeomError> {
        let n = self.cameras.len();
        if n < 2 {
            return Err(GeomError::DegenerateProblem(format!("{n} cameras, need at least 2")));
        }
        if self.gauge.fixed_camera >= n || self.gauge.scale_camera >= n || self.gauge.fixed_camera == self.gauge.scale_camera {
            return Err(GeomError::DegenerateProblem("gauge camera missing".into()));
        }
        if self.points.len() != self.tracks.len() {
            return Err(GeomError::DimensionMismatch(format!(
                "{} points for {} tracks",
                self.points.len(),
                self.tracks.len()
            )));
        }
        if baseline(&self.cameras, &self.gauge).norm() <= lit(1e-12) {
            return Err(GeomError::DegenerateProblem("scale camera coincides with the fixed camera".into()));
        }
        if !self.tracks.iter().any(|t| t.obs.len() >= 2) {
            return Err(GeomError::DegenerateProblem("no track is observed in two views".into()));
        }
        for (t, x) in self.tracks.iter().zip(&self.points) {
            if t.obs.iter().any(|o| o.view >= n) {
                return Err(GeomError::DegenerateProblem("track references a missing camera".into()));
            }
            if !x.iter().all(|c| c.is_finite()) {
                return Err(GeomError::InvalidArgument("non-finite initial point".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Relative cost decrease below which an accepted step ends the solve.
    pub tol: f64,
    pub damping_init: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-9,
            damping_init: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BAReport {
    /// Number of linear solves (accepted or rejected).
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
    /// Largest final reprojection residual norm in pixels.
    pub max_residual: f64,
}

/// Active parameter directions of one camera.
struct CameraBlock<T: Real> {
    offset: usize,
    basis: Vec<SMatrix<T, CAMERA_DOF, 1>>,
    keep_baseline: bool,
}

/// Center of the scale camera relative to the fixed camera's center.
fn baseline<T: Real>(cams: &[CameraParams<T>], gauge: &Gauge) -> Vector3<T> {
    cams[gauge.scale_camera].center() - cams[gauge.fixed_camera].center()
}

/// Moves the scale camera's center back onto the sphere of radius `length`
/// around the fixed camera's center, keeping its rotation.
fn restore_baseline<T: Real>(cams: &mut [CameraParams<T>], gauge: &Gauge, length: T) {
    let c0 = cams[gauge.fixed_camera].center();
    let b = baseline(cams, gauge);
    let cam = &mut cams[gauge.scale_camera];
    let c = c0 + b * (length / b.norm());
    cam.t = -(cam.q * c);
}

/// Built at the current cameras: the scale camera's tangent plane moves with it.
fn camera_blocks<T: Real>(p: &BAProblem<T>, cams: &[CameraParams<T>]) -> (Vec<CameraBlock<T>>, usize) {
    let mut offset = 0;
    let mut blocks = Vec::with_capacity(cams.len());
    for (c, cam) in cams.iter().enumerate() {
        let unit = |i: usize| {
            let mut e = SMatrix::<T, CAMERA_DOF, 1>::zeros();
            e[i] = T::one();
            e
        };
        let mut basis = Vec::new();
        let keep_baseline = c == p.gauge.scale_camera;
        if c != p.gauge.fixed_camera && keep_baseline {
            // rotate about the camera center: dt = w x t
            for k in 0..3 {
                let mut e = unit(k);
                let w: Vector3<T> = e.fixed_view::<3, 1>(0, 0).into_owned();
                e.fixed_view_mut::<3, 1>(3, 0).copy_from(&w.cross(&cam.t));
                basis.push(e);
            }
            // move the center within the tangent plane of the baseline sphere
            let n = baseline(cams, &p.gauge).normalize();
            let helper = if n.x.abs() < lit(0.9) { Vector3::x() } else { Vector3::y() };
            let a = n.cross(&helper).normalize();
            let b = n.cross(&a);
            for d in [a, b] {
                let mut e = SMatrix::<T, CAMERA_DOF, 1>::zeros();
                e.fixed_view_mut::<3, 1>(3, 0).copy_from(&-(cam.q * d));
                basis.push(e);
            }
        } else if c != p.gauge.fixed_camera {
            basis.extend((0..6).map(unit));
        }
        if !p.fix_intrinsics {
            basis.extend((6..10).map(unit));
        }
        let dim = basis.len();
        blocks.push(CameraBlock {
            offset,
            basis,
            keep_baseline,
        });
        offset += dim;
    }
    (blocks, offset)
}

/// Linearization of one point's observations.
struct PointLinearization<T: Real> {
    hpp: Matrix3<T>,
    gp: Vector3<T>,
    obs: Vec<ObsBlock<T>>,
}

struct ObsBlock<T: Real> {
    camera: usize,
    /// `J_c^T W J_c`, `J_c^T W J_p`, `J_c^T W r` in the camera's active basis.
    hcc: DMatrix<T>,
    hcp: DMatrix<T>,
    gc: DVector<T>,
}

fn point_cost<T: Real>(p: &BAProblem<T>, cams: &[CameraParams<T>], track: &Track<T>, x: &Vector3<T>) -> T {
    track
        .obs
        .iter()
        .map(|o| p.loss.eval(residual(&cams[o.view], x, &o.pix).norm_squared()).0)
        .fold(T::zero(), |a, b| a + b)
}

fn total_cost<T: Real>(p: &BAProblem<T>, cams: &[CameraParams<T>], pts: &[Vector3<T>]) -> f64 {
    let per_point: Vec<T> = p
        .tracks
        .par_iter()
        .zip(pts.par_iter())
        .map(|(t, x)| point_cost(p, cams, t, x))
        .collect();
    per_point.iter().map(|&c| to_f64(c)).sum()
}

fn linearize<T: Real>(
    p: &BAProblem<T>,
    blocks: &[CameraBlock<T>],
    cams: &[CameraParams<T>],
    track: &Track<T>,
    x: &Vector3<T>,
) -> PointLinearization<T> {
    let mut hpp = Matrix3::zeros();
    let mut gp = Vector3::zeros();
    let mut obs = Vec::with_capacity(track.obs.len());
    for o in &track.obs {
        let cam = &cams[o.view];
        let Some((pix, jc_full, jp)) = projection_jacobians(cam, x) else {
            continue;
        };
        let r = Vector2::new(pix.u - o.pix.u, pix.v - o.pix.v);
        let (_, w) = p.loss.eval(r.norm_squared());
        hpp += jp.transpose() * jp * w;
        gp += jp.transpose() * r * w;
        let basis = &blocks[o.view].basis;
        if basis.is_empty() {
            continue;
        }
        let k = basis.len();
        let mut jc = DMatrix::zeros(2, k);
        for (col, b) in basis.iter().enumerate() {
            let v = jc_full * b;
            jc[(0, col)] = v[0];
            jc[(1, col)] = v[1];
        }
        let jct = jc.transpose();
        let jp_dyn = DMatrix::from_iterator(2, 3, jp.iter().cloned());
        let r_dyn = DVector::from_column_slice(r.as_slice());
        obs.push(ObsBlock {
            camera: o.view,
            hcc: &jct * &jc * w,
            hcp: &jct * jp_dyn * w,
            gc: jct * r_dyn * w,
        });
    }
    PointLinearization { hpp, gp, obs }
}

fn damp_diag<T: Real>(d: T, lambda: T) -> T {
    d + lambda * d.max(lit(1e-9))
}

/// Solves the damped normal equations; returns camera and point increments
/// in the active parameterization.
fn solve_step<T: Real>(
    lin: &[PointLinearization<T>],
    blocks: &[CameraBlock<T>],
    n_cam_params: usize,
    lambda: T,
) -> Option<(DVector<T>, Vec<Vector3<T>>)> {
    // per-point damped inverse of the point block
    let hpp_inv: Vec<Option<Matrix3<T>>> = lin
        .par_iter()
        .map(|l| {
            let mut h = l.hpp;
            for i in 0..3 {
                h[(i, i)] = damp_diag(h[(i, i)], lambda);
            }
            h.cholesky().map(|c| c.inverse())
        })
        .collect();

    let mut s = DMatrix::<T>::zeros(n_cam_params, n_cam_params);
    let mut rhs = DVector::<T>::zeros(n_cam_params);
    for l in lin {
        for ob in &l.obs {
            let off = blocks[ob.camera].offset;
            let k = ob.gc.len();
            let mut view = s.view_mut((off, off), (k, k));
            view += &ob.hcc;
            let mut rv = rhs.rows_mut(off, k);
            rv -= &ob.gc;
        }
    }
    for i in 0..n_cam_params {
        s[(i, i)] = damp_diag(s[(i, i)], lambda);
    }

    // Schur contributions, computed per point and summed in point order
    type Contribution<T> = (Vec<(usize, usize, DMatrix<T>)>, Vec<(usize, DVector<T>)>);
    let contributions: Vec<Contribution<T>> = lin
        .par_iter()
        .zip(hpp_inv.par_iter())
        .map(|(l, inv)| {
            let Some(inv) = inv else { return (Vec::new(), Vec::new()) };
            let inv_dyn = DMatrix::from_iterator(3, 3, inv.iter().cloned());
            let gp = DVector::from_column_slice(l.gp.as_slice());
            let mut mats = Vec::new();
            let mut vecs = Vec::new();
            for oa in &l.obs {
                let wa = &oa.hcp * &inv_dyn;
                let ra = blocks[oa.camera].offset;
                vecs.push((ra, &wa * &gp));
                for ob in &l.obs {
                    mats.push((ra, blocks[ob.camera].offset, &wa * ob.hcp.transpose()));
                }
            }
            (mats, vecs)
        })
        .collect();
    for (mats, vecs) in &contributions {
        for (row, col, m) in mats {
            let mut view = s.view_mut((*row, *col), (m.nrows(), m.ncols()));
            view -= m;
        }
        for (row, v) in vecs {
            let mut rv = rhs.rows_mut(*row, v.nrows());
            rv += v;
        }
    }

    let dc = if n_cam_params > 0 {
        // symmetrize against round-off before factoring
        let st = s.transpose();
        let s = (s + st) * lit::<T>(0.5);
        s.cholesky()?.solve(&rhs)
    } else {
        DVector::zeros(0)
    };

    let dp: Vec<Vector3<T>> = lin
        .par_iter()
        .zip(hpp_inv.par_iter())
        .map(|(l, inv)| {
            let Some(inv) = inv else { return Vector3::zeros() };
            let mut g = l.gp;
            for ob in &l.obs {
                let off = blocks[ob.camera].offset;
                let k = ob.gc.len();
                let v = ob.hcp.transpose() * dc.rows(off, k);
                g += Vector3::new(v[0], v[1], v[2]);
            }
            -(inv * g)
        })
        .collect();
    Some((dc, dp))
}

fn apply_step<T: Real>(
    blocks: &[CameraBlock<T>],
    gauge: &Gauge,
    baseline_len: T,
    cams: &[CameraParams<T>],
    pts: &[Vector3<T>],
    dc: &DVector<T>,
    dp: &[Vector3<T>],
) -> Option<(Vec<CameraParams<T>>, Vec<Vector3<T>>)> {
    let mut new_cams = Vec::with_capacity(cams.len());
    let mut restore = false;
    for (cam, b) in cams.iter().zip(blocks) {
        let mut full = SMatrix::<T, CAMERA_DOF, 1>::zeros();
        for (i, e) in b.basis.iter().enumerate() {
            full += e * dc[b.offset + i];
        }
        let next = apply_camera_step(cam, full.as_slice());
        restore |= b.keep_baseline && !b.basis.is_empty();
        if !(next.intrinsics.fx > T::zero() && next.intrinsics.fy > T::zero()) {
            return None;
        }
        new_cams.push(next);
    }
    if restore {
        restore_baseline(&mut new_cams, gauge, baseline_len);
    }
    let new_pts = pts.iter().zip(dp).map(|(x, d)| x + d).collect();
    Some((new_cams, new_pts))
}

fn step_is_negligible<T: Real>(dc: &DVector<T>, dp: &[Vector3<T>], cams: &[CameraParams<T>], pts: &[Vector3<T>]) -> bool {
    let step2: f64 = dc.iter().map(|&v| to_f64(v * v)).sum::<f64>()
        + dp.iter().map(|d| to_f64(d.norm_squared())).sum::<f64>();
    let scale2: f64 = cams
        .iter()
        .map(|c| to_f64(c.t.norm_squared()) + 1.0 + c.intrinsics.as_array().iter().map(|&f| to_f64(f * f)).sum::<f64>())
        .sum::<f64>()
        + pts.iter().map(|x| to_f64(x.norm_squared())).sum::<f64>();
    step2.sqrt() <= 1e-14 * scale2.sqrt()
}

/// Refines cameras and points. The pose of `gauge.fixed_camera` and the
/// distance from `gauge.scale_camera` to the fixed camera stay at their initial values.
pub fn solve<T: Real>(
    p: &BAProblem<T>,
    opts: &SolveOptions,
) -> Result<(Vec<CameraParams<T>>, Vec<Vector3<T>>, BAReport), GeomError> {
    p.validate()?;
    let (mut blocks, n_cam_params) = camera_blocks(p, &p.cameras);
    let mut cams = p.cameras.clone();
    let mut pts = p.points.clone();
    let baseline_len = baseline(&cams, &p.gauge).norm();
    let mut cost = total_cost(p, &cams, &pts);
    if !cost.is_finite() {
        return Err(GeomError::NonFiniteCost(0));
    }
    let initial_cost = cost;
    let mut trace = vec![cost];
    let mut lambda = opts.damping_init;
    let mut iterations = 0;
    let mut converged = false;
    let mut relinearize = true;
    let mut lin = Vec::new();

    while iterations < opts.max_iters {
        if cost == 0.0 {
            converged = true;
            break;
        }
        if relinearize {
            blocks = camera_blocks(p, &cams).0;
            lin = p
                .tracks
                .par_iter()
                .zip(pts.par_iter())
                .map(|(t, x)| linearize(p, &blocks, &cams, t, x))
                .collect();
            relinearize = false;
        }
        iterations += 1;
        let candidate = solve_step(&lin, &blocks, n_cam_params, lit(lambda)).and_then(|(dc, dp)| {
            let negligible = step_is_negligible(&dc, &dp, &cams, &pts);
            apply_step(&blocks, &p.gauge, baseline_len, &cams, &pts, &dc, &dp).map(|s| (s, negligible))
        });
        let Some(((new_cams, new_pts), negligible)) = candidate else {
            lambda *= 10.0;
            if lambda > 1e16 {
                converged = true;
                break;
            }
            continue;
        };
        if negligible {
            converged = true;
            break;
        }
        let new_cost = total_cost(p, &new_cams, &new_pts);
        if !new_cost.is_finite() {
            return Err(GeomError::NonFiniteCost(iterations));
        }
        if new_cost < cost {
            let rel = (cost - new_cost) / cost;
            cams = new_cams;
            pts = new_pts;
            cost = new_cost;
            trace.push(cost);
            lambda = (lambda / 10.0).max(1e-12);
            relinearize = true;
            if rel < opts.tol {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                converged = true;
                break;
            }
        }
    }

    let max_residual = p
        .tracks
        .iter()
        .zip(&pts)
        .flat_map(|(t, x)| t.obs.iter().map(|o| to_f64(residual(&cams[o.view], x, &o.pix).norm())).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    let report = BAReport {
        iterations,
        initial_cost,
        final_cost: cost,
        cost_trace: trace,
        converged,
        max_residual,
    };
    Ok((cams, pts, report))
}
