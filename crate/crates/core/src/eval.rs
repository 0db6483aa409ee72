//! Reconstruction metrics: point recall/AUC after robust alignment, relative
//! pose AUC, chamfer accuracy/completeness and depth errors.

use std::fmt;
use std::str::FromStr;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::align::{robust_umeyama, RansacConfig, Sim3};
use crate::error::GeomError;
use crate::scalar::{to_f64, Real};
use crate::scene::{CameraParams, PointMapSet};

/// Length unit in which point thresholds are counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unit {
    Meter,
    Centimeter,
    Millimeter,
    /// Any positive length in scene units.
    Custom(f64),
}

impl Unit {
    /// Length of one unit in scene units (scenes are in meters).
    pub fn length(&self) -> f64 {
        match *self {
            Unit::Meter => 1.0,
            Unit::Centimeter => 0.01,
            Unit::Millimeter => 0.001,
            Unit::Custom(l) => l,
        }
    }
}

impl FromStr for Unit {
    type Err = GeomError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "m" => Ok(Unit::Meter),
            "cm" => Ok(Unit::Centimeter),
            "mm" => Ok(Unit::Millimeter),
            other => match other.parse::<f64>() {
                Ok(l) if l > 0.0 && l.is_finite() => Ok(Unit::Custom(l)),
                _ => Err(GeomError::Config(format!("unknown unit `{other}`"))),
            },
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Meter => f.write_str("m"),
            Unit::Centimeter => f.write_str("cm"),
            Unit::Millimeter => f.write_str("mm"),
            Unit::Custom(l) => write!(f, "{l}"),
        }
    }
}

/// Flat collection of metric values. Fractions lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub unit: String,
    /// `(k, Recall@k)` for k = 1..max tau.
    pub recall_at: Vec<(usize, f64)>,
    pub auc_at: Vec<(usize, f64)>,
    /// `(degrees, AUC)`.
    pub pose_auc: Vec<(f64, f64)>,
    pub chamfer_acc: Option<f64>,
    pub chamfer_comp: Option<f64>,
    pub depth_rel: Option<f64>,
    /// `(ratio, inlier fraction)`.
    pub depth_inlier: Vec<(f64, f64)>,
    pub n_valid: usize,
}

impl MetricReport {
    /// `metric=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.unit.is_empty() {
            out.push_str(&format!("unit={}\n", self.unit));
        }
        out.push_str(&format!("n_valid={}\n", self.n_valid));
        for (k, r) in &self.recall_at {
            out.push_str(&format!("recall@{k}={r}\n"));
        }
        for (k, a) in &self.auc_at {
            out.push_str(&format!("auc@{k}={a}\n"));
        }
        for (d, a) in &self.pose_auc {
            out.push_str(&format!("pose_auc@{d}={a}\n"));
        }
        if let Some(a) = self.chamfer_acc {
            out.push_str(&format!("chamfer_acc={a}\n"));
        }
        if let Some(c) = self.chamfer_comp {
            out.push_str(&format!("chamfer_comp={c}\n"));
        }
        if let Some(r) = self.depth_rel {
            out.push_str(&format!("depth_rel={r}\n"));
        }
        for (r, f) in &self.depth_inlier {
            out.push_str(&format!("depth_inlier@{r}={f}\n"));
        }
        out
    }

    /// `threshold,recall` rows.
    pub fn recall_csv(&self) -> String {
        let mut out = format!("threshold_{},recall\n", if self.unit.is_empty() { "unit" } else { &self.unit });
        for (k, r) in &self.recall_at {
            out.push_str(&format!("{k},{r}\n"));
        }
        out
    }
}

/// Fraction of errors strictly below `threshold`.
pub fn recall_at(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64
}

/// Recall at every integer threshold `1..=tau`.
pub fn recall_curve(errors: &[f64], tau: usize) -> Vec<(usize, f64)> {
    if errors.is_empty() {
        return (1..=tau).map(|k| (k, 0.0)).collect();
    }
    // errors in [k-1, k) first count at threshold k
    let mut hist = vec![0usize; tau + 1];
    for &e in errors {
        if e < tau as f64 {
            let k = if e < 0.0 { 1 } else { e.floor() as usize + 1 };
            hist[k.min(tau)] += 1;
        }
    }
    let n = errors.len() as f64;
    let mut acc = 0;
    (1..=tau)
        .map(|k| {
            acc += hist[k];
            (k, acc as f64 / n)
        })
        .collect()
}

/// Mean of Recall@1..tau taken from a curve that reaches at least `tau`.
pub fn auc_from_curve(curve: &[(usize, f64)], tau: usize) -> f64 {
    if tau == 0 {
        return 0.0;
    }
    curve.iter().take(tau).map(|&(_, r)| r).sum::<f64>() / tau as f64
}

/// Aligns `pred` to `gt` on pixels valid in both, then reports Recall@k and
/// AUC@tau in `unit`. Also returns the alignment.
pub fn point_auc<T: Real>(
    pred: &PointMapSet<T>,
    gt: &PointMapSet<T>,
    taus: &[usize],
    unit: Unit,
    align: &RansacConfig,
) -> Result<(MetricReport, Sim3<T>), GeomError> {
    if !pred.same_shape(gt) {
        return Err(GeomError::DimensionMismatch("prediction and ground truth grids differ".into()));
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| pred.valid[i] && gt.valid[i]).collect();
    if idx.is_empty() {
        return Err(GeomError::NoValidPixels);
    }
    let src: Vec<Vector3<T>> = idx.iter().map(|&i| pred.points[i]).collect();
    let dst: Vec<Vector3<T>> = idx.iter().map(|&i| gt.points[i]).collect();
    let (sim, _) = robust_umeyama(&src, &dst, align).map_err(|e| GeomError::AlignmentFailed(Box::new(e)))?;
    let len = unit.length();
    let errors: Vec<f64> = src
        .par_iter()
        .zip(dst.par_iter())
        .map(|(p, g)| to_f64((sim.apply(p) - g).norm()) / len)
        .collect();
    let tau_max = taus.iter().copied().max().unwrap_or(0);
    let curve = recall_curve(&errors, tau_max);
    let report = MetricReport {
        unit: unit.to_string(),
        auc_at: taus.iter().map(|&t| (t, auc_from_curve(&curve, t))).collect(),
        recall_at: curve,
        n_valid: idx.len(),
        ..Default::default()
    };
    Ok((report, sim))
}

/// Geodesic angle between two rotations, degrees.
fn rotation_angle_deg<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> f64 {
    let m = a * b.transpose();
    let tr = to_f64(m.trace());
    let c = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    // stable near zero: sin from the skew part
    let s = 0.5
        * Vector3::new(
            to_f64(m[(2, 1)] - m[(1, 2)]),
            to_f64(m[(0, 2)] - m[(2, 0)]),
            to_f64(m[(1, 0)] - m[(0, 1)]),
        )
        .norm();
    s.atan2(c).to_degrees()
}

fn direction_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Relative pose errors, degrees, for every ordered pair `(i, j)`, `i != j`.
pub fn relative_pose_errors<T: Real>(pred: &[CameraParams<T>], gt: &[CameraParams<T>]) -> Result<Vec<f64>, GeomError> {
    if pred.len() != gt.len() {
        return Err(GeomError::DimensionMismatch(format!("{} predicted vs {} reference cameras", pred.len(), gt.len())));
    }
    if pred.len() < 2 {
        return Err(GeomError::InvalidArgument("pose AUC needs at least two cameras".into()));
    }
    let rel = |c: &[CameraParams<T>], i: usize, j: usize| {
        let (ri, rj) = (c[i].rotation(), c[j].rotation());
        let r = rj * ri.transpose();
        let t = c[j].t - r * c[i].t;
        (r, Vector3::new(to_f64(t.x), to_f64(t.y), to_f64(t.z)))
    };
    let mut out = Vec::with_capacity(pred.len() * (pred.len() - 1));
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if i == j {
                continue;
            }
            let (rp, tp) = rel(pred, i, j);
            let (rg, tg) = rel(gt, i, j);
            let e_rot = rotation_angle_deg(&rp, &rg);
            let e_t = match (tp.norm() < 1e-9, tg.norm() < 1e-9) {
                (true, true) => 0.0,
                (false, false) => direction_angle_deg(&tp, &tg),
                _ => 180.0,
            };
            out.push(e_rot.max(e_t));
        }
    }
    Ok(out)
}

pub const POSE_AUC_STEP_DEG: f64 = 0.1;

/// `(1/X) * integral_0^X recall(t) dt`, midpoint rule with spacing `step`.
pub fn error_auc(errors: &[f64], max_deg: f64, step: f64) -> f64 {
    let n = (max_deg / step).round().max(1.0) as usize;
    let h = max_deg / n as f64;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total = sorted.len().max(1) as f64;
    (0..n)
        .map(|m| {
            let t = (m as f64 + 0.5) * h;
            sorted.partition_point(|&e| e <= t) as f64 / total
        })
        .sum::<f64>()
        / n as f64
}

/// Pose AUC at each threshold in degrees.
pub fn pose_auc<T: Real>(pred: &[CameraParams<T>], gt: &[CameraParams<T>], max_deg: &[f64]) -> Result<Vec<(f64, f64)>, GeomError> {
    let errors = relative_pose_errors(pred, gt)?;
    Ok(max_deg.iter().map(|&d| (d, error_auc(&errors, d, POSE_AUC_STEP_DEG))).collect())
}

fn tree(points: &[[f64; 3]]) -> ImmutableKdTree<f64, u64, 3, 32> {
    ImmutableKdTree::new_from_slice(points)
}

fn fraction_within(query: &[[f64; 3]], reference: &ImmutableKdTree<f64, u64, 3, 32>, dist: f64) -> f64 {
    let d2 = dist * dist;
    let hits = query
        .par_iter()
        .filter(|q| reference.nearest_one::<SquaredEuclidean>(q).distance <= d2)
        .count();
    hits as f64 / query.len() as f64
}

/// Accuracy (pred near gt) and completeness (gt near pred) at `dist`.
pub fn chamfer<T: Real>(pred: &[Vector3<T>], gt: &[Vector3<T>], dist: f64) -> Result<(f64, f64), GeomError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let arr = |v: &[Vector3<T>]| v.iter().map(|p| [to_f64(p.x), to_f64(p.y), to_f64(p.z)]).collect::<Vec<_>>();
    let (p, g) = (arr(pred), arr(gt));
    Ok((fraction_within(&p, &tree(&g), dist), fraction_within(&g, &tree(&p), dist)))
}

/// Moves a camera expressed in the frame of `sim`'s source to its target
/// frame, keeping target-frame scale: `R' = R R_s^T`, `t' = s t - R' t_s`.
pub fn transform_camera<T: Real>(cam: &CameraParams<T>, sim: &Sim3<T>) -> CameraParams<T> {
    let q = cam.q * sim.rotation.inverse();
    CameraParams {
        q,
        t: cam.t * sim.scale - q * sim.translation,
        intrinsics: cam.intrinsics,
    }
}

/// Depth errors of `pred` (in the source frame of `sim`) against per-view
/// reference depths. Returns Rel and the inlier fraction per ratio.
pub fn depth_metrics<T: Real>(
    pred: &PointMapSet<T>,
    cams: &[CameraParams<T>],
    gt_depth: &[f64],
    gt_mask: &[bool],
    sim: &Sim3<T>,
    ratios: &[f64],
) -> Result<(f64, Vec<(f64, f64)>), GeomError> {
    if cams.len() != pred.n_views || gt_depth.len() != pred.len() || gt_mask.len() != pred.len() {
        return Err(GeomError::DimensionMismatch("depth inputs do not match the point map".into()));
    }
    let moved: Vec<CameraParams<T>> = cams.iter().map(|c| transform_camera(c, sim)).collect();
    let per_view = pred.height * pred.width;
    let pairs: Vec<(f64, f64)> = (0..pred.len())
        .filter(|&i| pred.valid[i] && gt_mask[i] && gt_depth[i] > 0.0)
        .map(|i| {
            let x = sim.apply(&pred.points[i]);
            let d_hat = to_f64(moved[i / per_view].to_camera(&x).z);
            (d_hat, gt_depth[i])
        })
        .collect();
    if pairs.is_empty() {
        return Err(GeomError::NoValidPixels);
    }
    let n = pairs.len() as f64;
    let rel = pairs.iter().map(|(p, d)| (p - d).abs() / d).sum::<f64>() / n;
    let inliers = ratios
        .iter()
        .map(|&r| {
            let k = pairs.iter().filter(|(p, d)| *p > 0.0 && (p / d).max(d / p) < r).count();
            (r, k as f64 / n)
        })
        .collect();
    Ok((rel, inliers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SceneRng;
    use crate::scene::Intrinsics;
    use nalgebra::UnitQuaternion;

    fn map_of(points: Vec<Vector3<f64>>) -> PointMapSet<f64> {
        let n = points.len();
        let mut pm = PointMapSet::empty(1, 1, n);
        pm.points = points;
        pm.valid = vec![true; n];
        pm.confidence = vec![1.0; n];
        pm
    }

    fn random_points(rng: &mut SceneRng, n: usize) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.uniform(), rng.uniform(), rng.uniform()) * 10.0).collect()
    }

    #[test]
    fn identical_maps_have_full_recall() {
        let mut rng = SceneRng::new(1);
        let gt = map_of(random_points(&mut rng, 500));
        let (r, _) = point_auc(&gt, &gt, &[1, 5], Unit::Centimeter, &RansacConfig::default()).unwrap();
        assert!(r.recall_at.iter().all(|&(_, v)| v == 1.0));
        assert_eq!(r.auc_at, vec![(1, 1.0), (5, 1.0)]);
        assert_eq!(r.n_valid, 500);
    }

    #[test]
    fn half_offset_construction() {
        let errors: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 0.0 } else { 1.5 }).collect();
        let c = recall_curve(&errors, 2);
        assert_eq!(c, vec![(1, 0.5), (2, 1.0)]);
        assert_eq!(auc_from_curve(&c, 2), 0.75);
    }

    #[test]
    fn curve_matches_double_loop() {
        let mut rng = SceneRng::new(2);
        for tau in [1, 3, 10] {
            let errors: Vec<f64> = (0..1000).map(|_| rng.uniform() * 12.0).collect();
            let curve = recall_curve(&errors, tau);
            for &(k, r) in &curve {
                let brute = errors.iter().filter(|&&e| e < k as f64).count() as f64 / errors.len() as f64;
                assert_eq!(r, brute);
            }
            let brute_auc = (1..=tau).map(|k| recall_at(&errors, k as f64)).sum::<f64>() / tau as f64;
            assert_eq!(auc_from_curve(&curve, tau), brute_auc);
        }
    }

    #[test]
    fn similarity_of_prediction_does_not_change_auc() {
        let mut rng = SceneRng::new(3);
        let gt_pts = random_points(&mut rng, 400);
        let pred_pts: Vec<_> = gt_pts.iter().map(|p| p + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.004).collect();
        let (gt, pred) = (map_of(gt_pts), map_of(pred_pts.clone()));
        let cfg = RansacConfig::default();
        let (a, _) = point_auc(&pred, &gt, &[1, 2, 5], Unit::Centimeter, &cfg).unwrap();
        let s = Sim3::new(2.5, UnitQuaternion::from_euler_angles(0.3, -1.0, 2.0), Vector3::new(5.0, -3.0, 1.0));
        let moved = map_of(pred_pts.iter().map(|p| s.apply(p)).collect());
        let cfg = RansacConfig { max_err: cfg.max_err * 2.5, ..cfg };
        let (b, _) = point_auc(&moved, &gt, &[1, 2, 5], Unit::Centimeter, &cfg).unwrap();
        for (x, y) in a.auc_at.iter().zip(&b.auc_at) {
            assert!((x.1 - y.1).abs() < 1e-9);
        }
    }

    #[test]
    fn no_valid_pixels() {
        let mut gt = map_of(vec![Vector3::zeros(); 4]);
        gt.valid = vec![false; 4];
        assert_eq!(
            point_auc(&gt, &gt, &[1], Unit::Meter, &RansacConfig::default()).unwrap_err(),
            GeomError::NoValidPixels
        );
    }

    fn ring(n: usize, rng: &mut SceneRng) -> Vec<CameraParams<f64>> {
        (0..n)
            .map(|_| CameraParams {
                q: UnitQuaternion::from_scaled_axis(Vector3::new(rng.normal(), rng.normal(), rng.normal())),
                t: Vector3::new(rng.normal(), rng.normal(), rng.normal()),
                intrinsics: Intrinsics::new(100.0, 100.0, 50.0, 50.0),
            })
            .collect()
    }

    #[test]
    fn pose_auc_examples() {
        let mut rng = SceneRng::new(4);
        let gt = ring(5, &mut rng);
        assert!(pose_auc(&gt, &gt, &[1.0, 5.0, 10.0]).unwrap().iter().all(|&(_, a)| (a - 1.0).abs() < 1e-12));
        let errors = vec![5.0; 20];
        assert!((error_auc(&errors, 10.0, POSE_AUC_STEP_DEG) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pose_auc_ignores_global_rigid_motion() {
        let mut rng = SceneRng::new(5);
        let gt = ring(6, &mut rng);
        let pred: Vec<_> = gt
            .iter()
            .map(|c| CameraParams {
                q: UnitQuaternion::from_scaled_axis(Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.02) * c.q,
                t: c.t + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.02,
                ..*c
            })
            .collect();
        let base = relative_pose_errors(&pred, &gt).unwrap();
        let sim = Sim3::new(1.0, UnitQuaternion::from_euler_angles(0.4, 0.1, -0.7), Vector3::new(1.0, 2.0, 3.0));
        let moved: Vec<_> = pred.iter().map(|c| transform_camera(c, &sim)).collect();
        let after = relative_pose_errors(&moved, &gt).unwrap();
        for (a, b) in base.iter().zip(&after) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_auc_matches_fine_integration() {
        let mut rng = SceneRng::new(6);
        let errors: Vec<f64> = (0..56).map(|_| rng.uniform() * 12.0).collect();
        for x in [1.0, 5.0, 10.0] {
            let fine = error_auc(&errors, x, 0.01);
            let exact = errors.iter().map(|&e| ((x - e) / x).max(0.0)).sum::<f64>() / errors.len() as f64;
            assert!((error_auc(&errors, x, POSE_AUC_STEP_DEG) - fine).abs() < 0.005);
            assert!((fine - exact).abs() < 0.005);
        }
    }

    #[test]
    fn chamfer_examples() {
        let mut rng = SceneRng::new(7);
        let gt = random_points(&mut rng, 300);
        assert_eq!(chamfer(&gt, &gt, 1e-9).unwrap(), (1.0, 1.0));
        let (acc, comp) = chamfer(&gt[..1], &gt, 1e-9).unwrap();
        assert_eq!(acc, 1.0);
        assert!((comp - 1.0 / 300.0).abs() < 1e-15);
        assert_eq!(chamfer(&gt[..50], &gt, 1e-9).unwrap().0, 1.0);
        assert_eq!(chamfer::<f64>(&[], &gt, 1.0), Err(GeomError::EmptyCloud));
        let pred = random_points(&mut rng, 200);
        let (acc, comp) = chamfer(&pred, &gt, 0.8).unwrap();
        let brute = |a: &[Vector3<f64>], b: &[Vector3<f64>]| {
            a.iter().filter(|p| b.iter().map(|q| (*p - q).norm()).fold(f64::INFINITY, f64::min) <= 0.8).count() as f64 / a.len() as f64
        };
        assert_eq!(acc, brute(&pred, &gt));
        assert_eq!(comp, brute(&gt, &pred));
    }

    #[test]
    fn depth_examples() {
        let cam = CameraParams::identity(Intrinsics::new(100.0, 100.0, 0.0, 0.0));
        let d = vec![2.0, 3.0, 4.0];
        let pts: Vec<_> = d.iter().map(|&z| Vector3::new(0.1, 0.2, z * 1.02)).collect();
        let pm = map_of(pts);
        let (rel, inl) = depth_metrics(&pm, &[cam], &d, &[true; 3], &Sim3::identity(), &[1.01, 1.03]).unwrap();
        assert!((rel - 0.02).abs() < 1e-12);
        assert_eq!(inl, vec![(1.01, 0.0), (1.03, 1.0)]);
        let exact = map_of(d.iter().map(|&z| Vector3::new(0.0, 0.0, z)).collect());
        let (rel, inl) = depth_metrics(&exact, &[cam], &d, &[true; 3], &Sim3::identity(), &[1.01]).unwrap();
        assert_eq!(rel, 0.0);
        assert_eq!(inl, vec![(1.01, 1.0)]);
    }

    #[test]
    fn depth_is_similarity_consistent() {
        // a prediction in a scaled, rotated frame measures the same depths
        let mut rng = SceneRng::new(8);
        let cams = ring(3, &mut rng);
        let mut pm = PointMapSet::empty(3, 2, 5);
        let mut depth = vec![0.0; pm.len()];
        for i in 0..pm.len() {
            let view = i / 10;
            let x = cams[view].center() + cams[view].rotation().transpose() * Vector3::new(rng.normal(), rng.normal(), 3.0 + rng.uniform());
            pm.points[i] = x;
            pm.valid[i] = true;
            depth[i] = cams[view].to_camera(&x).z;
        }
        let sim = Sim3::new(0.5, UnitQuaternion::from_euler_angles(1.0, 0.2, 0.3), Vector3::new(0.3, 0.0, -2.0));
        let inv = sim.inverse();
        let pred = PointMapSet { points: pm.points.iter().map(|p| inv.apply(p)).collect(), ..pm.clone() };
        let pred_cams: Vec<_> = cams.iter().map(|c| transform_camera(c, &inv)).collect();
        let (rel, _) = depth_metrics(&pred, &pred_cams, &depth, &vec![true; pm.len()], &sim, &[1.01]).unwrap();
        assert!(rel < 1e-12);
    }
}
