//! Similarity alignment of paired point sets (Umeyama) and its RANSAC
//! variant.

use nalgebra::{Matrix3, Matrix3x4, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, SVD};
use rayon::prelude::*;

use crate::error::GeomError;
use crate::rng::SceneRng;
use crate::scalar::{lit, to_f64, Real};

/// `x -> s * R * x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3<T: Real> {
    pub scale: T,
    pub rotation: UnitQuaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Sim3<T> {
    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: T, rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn apply(&self, x: &Vector3<T>) -> Vector3<T> {
        (self.rotation * x) * self.scale + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        let inv_s = T::one() / self.scale;
        Self {
            scale: inv_s,
            rotation: inv_rot,
            translation: -(inv_rot * self.translation) * inv_s,
        }
    }

    /// The 3x4 matrix `[sR | t]`.
    pub fn matrix(&self) -> Matrix3x4<T> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation.to_rotation_matrix().into_inner() * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

fn centroid<T: Real>(pts: &[Vector3<T>]) -> Vector3<T> {
    let n: T = lit(pts.len() as f64);
    pts.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n
}

/// Least-squares similarity mapping `src` onto `dst`, excluding reflections.
pub fn umeyama<T: Real>(src: &[Vector3<T>], dst: &[Vector3<T>]) -> Result<Sim3<T>, GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::DimensionMismatch(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(GeomError::DegenerateConfiguration(format!("{} pairs, need at least 3", src.len())));
    }
    let n: T = lit(src.len() as f64);
    let mu_s = centroid(src);
    let mu_d = centroid(dst);

    let mut cov = Matrix3::zeros();
    let mut cov_src = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let ds = s - mu_s;
        let dd = d - mu_d;
        cov += dd * ds.transpose();
        cov_src += ds * ds.transpose();
    }
    cov /= n;
    cov_src /= n;

    let var_src = cov_src.trace();
    let mut spread = SymmetricEigen::new(cov_src).eigenvalues.as_slice().to_vec();
    spread.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if !(var_src > T::zero()) || !(spread[1] > spread[0] * lit(1e-12)) {
        return Err(GeomError::DegenerateConfiguration("source points are collinear or coincident".into()));
    }

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeomError::DegenerateConfiguration("SVD did not converge".into())),
    };
    let mut signs = Vector3::new(T::one(), T::one(), T::one());
    if u.determinant() * v_t.determinant() < T::zero() {
        signs.z = -T::one();
    }
    let r = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = svd.singular_values.dot(&signs) / var_src;
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = mu_d - (rotation * mu_s) * scale;
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

/// RANSAC settings for [`robust_umeyama`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Inlier threshold on the post-transform distance.
    pub max_err: f64,
    pub min_inlier_ratio: f64,
    /// Probability of drawing at least one all-inlier sample.
    pub confidence: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_err: 0.03,
            min_inlier_ratio: 0.8,
            confidence: 0.999,
            max_iters: 10_000,
            seed: 0,
        }
    }
}

const RANSAC_BATCH: usize = 32;

fn inlier_mask<T: Real>(m: &Sim3<T>, src: &[Vector3<T>], dst: &[Vector3<T>], max_err: T) -> Vec<bool> {
    src.iter().zip(dst).map(|(s, d)| (m.apply(s) - d).norm() < max_err).collect()
}

fn required_iterations(inlier_ratio: f64, confidence: f64) -> usize {
    let w3 = inlier_ratio.powi(3);
    if w3 >= 1.0 {
        return 1;
    }
    if w3 <= 0.0 {
        return usize::MAX;
    }
    let k = (1.0 - confidence).ln() / (1.0 - w3).ln();
    if k.is_finite() {
        k.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// RANSAC over minimal 3-point samples, refit on the best consensus set and
/// one final inlier re-classification. Deterministic for a fixed seed.
pub fn robust_umeyama<T: Real>(
    src: &[Vector3<T>],
    dst: &[Vector3<T>],
    cfg: &RansacConfig,
) -> Result<(Sim3<T>, Vec<bool>), GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::DimensionMismatch(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    let n = src.len();
    if n < 3 {
        return Err(GeomError::DegenerateConfiguration(format!("{n} pairs, need at least 3")));
    }
    let max_err: T = lit(cfg.max_err);
    let mut rng = SceneRng::new(cfg.seed);
    let mut best: Option<(usize, Sim3<T>)> = None;
    let mut done = 0usize;
    let mut needed = cfg.max_iters;
    while done < needed.min(cfg.max_iters) {
        let batch = RANSAC_BATCH.min(cfg.max_iters - done);
        let samples: Vec<Vec<usize>> = (0..batch).map(|_| rng.sample_distinct(n, 3)).collect();
        let scored: Vec<Option<(usize, Sim3<T>)>> = samples
            .par_iter()
            .map(|s| {
                let a: Vec<_> = s.iter().map(|&i| src[i]).collect();
                let b: Vec<_> = s.iter().map(|&i| dst[i]).collect();
                let m = umeyama(&a, &b).ok()?;
                let count = inlier_mask(&m, src, dst, max_err).iter().filter(|&&x| x).count();
                Some((count, m))
            })
            .collect();
        // first (lowest index) hypothesis wins ties
        for (count, m) in scored.into_iter().flatten() {
            if best.as_ref().is_none_or(|(c, _)| count > *c) {
                best = Some((count, m));
            }
        }
        done += batch;
        if let Some((count, _)) = &best {
            needed = required_iterations(*count as f64 / n as f64, cfg.confidence);
        }
    }

    let Some((_, hypothesis)) = best else {
        return Err(GeomError::InsufficientInliers {
            ratio: 0.0,
            required: cfg.min_inlier_ratio,
        });
    };
    let mask = inlier_mask(&hypothesis, src, dst, max_err);
    let (a, b): (Vec<_>, Vec<_>) = src
        .iter()
        .zip(dst)
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|((s, d), _)| (*s, *d))
        .unzip();
    let model = umeyama(&a, &b).unwrap_or(hypothesis);
    let mask = inlier_mask(&model, src, dst, max_err);
    let ratio = mask.iter().filter(|&&x| x).count() as f64 / n as f64;
    if ratio < cfg.min_inlier_ratio {
        return Err(GeomError::InsufficientInliers {
            ratio,
            required: cfg.min_inlier_ratio,
        });
    }
    Ok((model, mask))
}

/// RMS of `|m(src_i) - dst_i|`.
pub fn alignment_rms<T: Real>(m: &Sim3<T>, src: &[Vector3<T>], dst: &[Vector3<T>]) -> f64 {
    let sum: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| to_f64((m.apply(s) - d).norm_squared()))
        .sum();
    (sum / src.len().max(1) as f64).sqrt()
}
