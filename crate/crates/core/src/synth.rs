//! Synthetic ground-truth scenes.
//!
//! Analytic surfaces (spheres, square plates, a floor and optionally an
//! enclosing backdrop sphere) are ray-cast from cameras on a ring. Ground
//! truth points are sampled from the rendered pixels; correspondences come
//! from projecting them into the other views with optional pixel noise,
//! outliers and dropout. Randomness comes from [`SceneRng`] (SplitMix64), so
//! a seed fixes the scene on every platform.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::GeomError;
use crate::matching::CorrGraph;
use crate::rng::SceneRng;
use crate::scene::{project, CameraParams, Intrinsics, PixelCoord, PointMapSet};
use crate::triangulate::PixelRef;

pub use crate::scene::unproject;

/// Relative depth tolerance of the visibility test.
const VISIBILITY_TOL: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_views: usize,
    pub n_points: usize,
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub ring_radius: f64,
    /// Angular extent of the camera arc.
    pub ring_arc_deg: f64,
    pub ring_height: f64,
    /// Standard deviation of the look-at target around the scene centre.
    pub look_at_jitter: f64,
    pub n_spheres: usize,
    pub n_planes: usize,
    pub floor: bool,
    /// Encloses the scene so that every pixel sees a surface.
    pub backdrop: bool,
    /// Pixel noise standard deviation.
    pub noise_px: f64,
    pub outlier_fraction: f64,
    pub outlier_conf: f64,
    pub dropout: f64,
    /// Amplitude of the per-view sinusoidal drift added to the dense map.
    pub drift_amplitude: f64,
    pub init_rot_deg: f64,
    pub init_trans_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_views: 8,
            n_points: 2000,
            height: 96,
            width: 128,
            focal: 160.0,
            ring_radius: 4.0,
            ring_arc_deg: 90.0,
            ring_height: 1.5,
            look_at_jitter: 0.05,
            n_spheres: 6,
            n_planes: 3,
            floor: true,
            backdrop: false,
            noise_px: 0.0,
            outlier_fraction: 0.0,
            outlier_conf: 0.9,
            dropout: 0.0,
            drift_amplitude: 0.0,
            init_rot_deg: 2.0,
            init_trans_frac: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, GeomError> {
        let cfg: Self = toml::from_str(s).map_err(|e| GeomError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let bad = |m: &str| Err(GeomError::Config(m.to_string()));
        if self.n_views < 2 {
            return bad("n_views must be at least 2");
        }
        if self.height < 3 || self.width < 3 {
            return bad("images must be at least 3x3");
        }
        for (name, p) in [
            ("outlier_fraction", self.outlier_fraction),
            ("dropout", self.dropout),
            ("outlier_conf", self.outlier_conf),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.noise_px >= 0.0 && self.drift_amplitude >= 0.0 && self.init_rot_deg >= 0.0 && self.init_trans_frac >= 0.0) {
            return bad("noise, drift and perturbations must be nonnegative");
        }
        if !(self.focal > 0.0 && self.ring_radius > 0.0) {
            return bad("focal and ring radius must be positive");
        }
        if self.n_spheres + self.n_planes == 0 && !self.floor && !self.backdrop {
            return bad("scene has no surfaces");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Surface {
    Sphere { c: Vector3<f64>, r: f64 },
    Plate { c: Vector3<f64>, n: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>, ha: f64, hb: f64 },
}

impl Surface {
    /// Smallest positive depth at which `origin + d * dir` hits the surface.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const MIN_DEPTH: f64 = 1e-9;
        match self {
            Surface::Sphere { c, r } => {
                let oc = origin - c;
                let a = dir.norm_squared();
                let b = dir.dot(&oc);
                let cc = oc.norm_squared() - r * r;
                let disc = b * b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [(-b - s) / a, (-b + s) / a].into_iter().find(|&d| d > MIN_DEPTH)
            }
            Surface::Plate { c, n, a, b, ha, hb } => {
                let den = n.dot(dir);
                if den.abs() < 1e-12 {
                    return None;
                }
                let d = n.dot(&(c - origin)) / den;
                let x = origin + dir * d;
                (d > MIN_DEPTH && a.dot(&(x - c)).abs() <= *ha && b.dot(&(x - c)).abs() <= *hb).then_some(d)
            }
        }
    }
}

/// Rotation whose third row looks along `fwd` with image rows pointing
/// away from world `+y`.
fn look_rotation(fwd: &Vector3<f64>) -> UnitQuaternion<f64> {
    let z = fwd.normalize();
    let down = -Vector3::y();
    let y = (down - z * down.dot(&z)).normalize();
    let x = y.cross(&z);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r))
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SynthConfig,
    pub gt_cameras: Vec<CameraParams<f64>>,
    pub init_cameras: Vec<CameraParams<f64>>,
    pub gt_points: Vec<Vector3<f64>>,
    /// Pixel each ground truth point was sampled from.
    pub gt_anchors: Vec<PixelRef>,
    /// Ray-cast ground truth point maps.
    pub gt_map: PointMapSet<f64>,
    /// Camera depth of every pixel; zero where invalid.
    pub gt_depth: Vec<f64>,
    pub graph: CorrGraph<f64>,
    /// Ground truth map plus drift.
    pub dense: PointMapSet<f64>,
    /// Per view `[u, v, u+v]` phases of the drift field.
    pub drift_phases: Vec<[f64; 3]>,
    /// Number of forward correspondences that are outliers.
    pub n_outliers: usize,
}

impl SyntheticScene {
    /// Index of the ground truth point anchored at a pixel.
    pub fn point_at_anchor(&self, p: &PixelRef) -> Option<usize> {
        self.gt_anchors.binary_search(p).ok()
    }
}

/// Drift displacement at an integer pixel.
pub fn drift_at(amplitude: f64, phases: &[f64; 3], u: usize, v: usize, width: usize, height: usize) -> Vector3<f64> {
    let tau = std::f64::consts::TAU;
    let (fu, fv) = (u as f64 / width as f64, v as f64 / height as f64);
    Vector3::new(
        (tau * fu + phases[0]).sin(),
        (tau * fv + phases[1]).sin(),
        (tau * (fu + fv) + phases[2]).sin(),
    ) * amplitude
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticScene, GeomError> {
    cfg.validate()?;
    let mut root = SceneRng::new(cfg.seed);
    let mut rng_obj = root.fork(1);
    let mut rng_cam = root.fork(2);
    let mut rng_pts = root.fork(3);
    let mut rng_corr = root.fork(4);
    let mut rng_drift = root.fork(5);
    let mut rng_init = root.fork(6);

    let mut surfaces = Vec::new();
    let mut centers = Vec::new();
    for _ in 0..cfg.n_spheres {
        let c = Vector3::new(
            rng_obj.uniform_range(-0.6, 0.6),
            rng_obj.uniform_range(-0.6, 0.6),
            rng_obj.uniform_range(-0.6, 0.6),
        );
        centers.push(c);
        surfaces.push(Surface::Sphere { c, r: rng_obj.uniform_range(0.15, 0.35) });
    }
    for _ in 0..cfg.n_planes {
        let c = Vector3::new(
            rng_obj.uniform_range(-0.7, 0.7),
            rng_obj.uniform_range(-0.7, 0.7),
            rng_obj.uniform_range(-0.7, 0.7),
        );
        let n = vec3(rng_obj.unit_vector());
        let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let a = n.cross(&helper).normalize();
        let b = n.cross(&a);
        centers.push(c);
        surfaces.push(Surface::Plate {
            c,
            n,
            a,
            b,
            ha: rng_obj.uniform_range(0.25, 0.5),
            hb: rng_obj.uniform_range(0.25, 0.5),
        });
    }
    if cfg.floor {
        surfaces.push(Surface::Plate {
            c: Vector3::new(0.0, -1.0, 0.0),
            n: Vector3::y(),
            a: Vector3::x(),
            b: Vector3::z(),
            ha: 1.5,
            hb: 1.5,
        });
    }
    let center = if centers.is_empty() {
        Vector3::zeros()
    } else {
        centers.iter().sum::<Vector3<f64>>() / centers.len() as f64
    };
    if cfg.backdrop {
        surfaces.push(Surface::Sphere {
            c: center,
            r: 2.5 * (cfg.ring_radius.hypot(cfg.ring_height)),
        });
    }

    let intr = Intrinsics::new(cfg.focal, cfg.focal, (cfg.width as f64 - 1.0) / 2.0, (cfg.height as f64 - 1.0) / 2.0);
    let arc = cfg.ring_arc_deg.to_radians();
    let gt_cameras: Vec<CameraParams<f64>> = (0..cfg.n_views)
        .map(|i| {
            let theta = -arc / 2.0 + arc * i as f64 / (cfg.n_views - 1) as f64;
            let c = center + Vector3::new(cfg.ring_radius * theta.sin(), cfg.ring_height, -cfg.ring_radius * theta.cos());
            let target = center + vec3([rng_cam.normal(), rng_cam.normal(), rng_cam.normal()]) * cfg.look_at_jitter;
            let q = look_rotation(&(target - c));
            CameraParams { q, t: -(q * c), intrinsics: intr }
        })
        .collect();

    let (h, w) = (cfg.height, cfg.width);
    let mut gt_map = PointMapSet::empty(cfg.n_views, h, w);
    let mut gt_depth = vec![0.0; gt_map.len()];
    let kinv = intr.matrix().try_inverse().expect("positive focal");
    for (view, cam) in gt_cameras.iter().enumerate() {
        let origin = cam.center();
        let rt = cam.rotation().transpose();
        for v in 0..h {
            for u in 0..w {
                let dir = rt * (kinv * Vector3::new(u as f64, v as f64, 1.0));
                let depth = surfaces
                    .iter()
                    .filter_map(|s| s.hit(&origin, &dir))
                    .fold(f64::INFINITY, f64::min);
                if depth.is_finite() {
                    let f = gt_map.index(view, v, u);
                    gt_map.points[f] = unproject(cam, &PixelCoord::new(u as f64, v as f64), depth);
                    gt_map.valid[f] = true;
                    gt_map.confidence[f] = 1.0;
                    gt_depth[f] = depth;
                }
            }
        }
    }

    let valid = gt_map.valid_indices();
    if valid.len() < cfg.n_points {
        return Err(GeomError::Config(format!(
            "only {} valid pixels for {} points",
            valid.len(),
            cfg.n_points
        )));
    }
    let mut picks: Vec<usize> = rng_pts
        .sample_distinct(valid.len(), cfg.n_points)
        .into_iter()
        .map(|i| valid[i])
        .collect();
    // PixelRef order, so anchors can be binary searched
    picks.sort_unstable_by_key(|&f| {
        let (view, v, u) = gt_map.unflatten(f);
        (view, u, v)
    });
    let gt_anchors: Vec<PixelRef> = picks
        .iter()
        .map(|&f| {
            let (view, v, u) = gt_map.unflatten(f);
            PixelRef { view, u, v }
        })
        .collect();
    let gt_points: Vec<Vector3<f64>> = picks.iter().map(|&f| gt_map.points[f]).collect();

    let mut graph = CorrGraph::new(cfg.n_views, h, w);
    let mut used = vec![vec![false; h * w]; cfg.n_views * (cfg.n_views - 1)];
    let mut n_outliers = 0;
    for (x, a) in gt_points.iter().zip(&gt_anchors) {
        let anchor_px = a.v * w + a.u;
        for k in 0..cfg.n_views {
            if k == a.view {
                continue;
            }
            let cam = &gt_cameras[k];
            let Ok(p) = project(cam, x) else { continue };
            let Some((ru, rv)) = p.round_in_bounds(w, h) else { continue };
            let fk = gt_map.index(k, rv, ru);
            let z = cam.to_camera(x).z;
            if !gt_map.valid[fk] || (gt_depth[fk] - z).abs() > VISIBILITY_TOL * z {
                continue;
            }
            // draws happen for every visible observation to keep streams aligned
            let drop = rng_corr.uniform() < cfg.dropout;
            let outlier = rng_corr.uniform() < cfg.outlier_fraction;
            let (nu, nv) = (rng_corr.normal(), rng_corr.normal());
            let (ou, ov) = (rng_corr.uniform(), rng_corr.uniform());
            if drop {
                continue;
            }
            let (target, conf) = if outlier {
                (PixelCoord::new(ou * (w - 1) as f64, ov * (h - 1) as f64), cfg.outlier_conf)
            } else if cfg.noise_px > 0.0 {
                let c = (-(nu * nu + nv * nv) / 2.0).exp();
                (PixelCoord::new(p.u + nu * cfg.noise_px, p.v + nv * cfg.noise_px), c)
            } else {
                (p, 1.0)
            };
            let Some((bu, bv)) = target.round_in_bounds(w, h) else { continue };
            let fwd = graph.pair_index(a.view, k);
            let bwd = graph.pair_index(k, a.view);
            let back_px = bv * w + bu;
            if used[fwd][anchor_px] || used[bwd][back_px] {
                continue;
            }
            used[fwd][anchor_px] = true;
            used[bwd][back_px] = true;
            let g = graph.pair_mut(a.view, k);
            g.target[anchor_px] = target;
            g.conf[anchor_px] = conf;
            g.valid[anchor_px] = true;
            let g = graph.pair_mut(k, a.view);
            g.target[back_px] = PixelCoord::new(a.u as f64, a.v as f64);
            g.conf[back_px] = conf;
            g.valid[back_px] = false;
            n_outliers += outlier as usize;
        }
    }

    let drift_phases: Vec<[f64; 3]> = (0..cfg.n_views)
        .map(|_| {
            let mut p = [0.0; 3];
            for v in &mut p {
                *v = rng_drift.uniform_range(0.0, std::f64::consts::TAU);
            }
            p
        })
        .collect();
    let mut dense = gt_map.clone();
    for f in 0..dense.len() {
        if dense.valid[f] && cfg.drift_amplitude > 0.0 {
            let (view, v, u) = dense.unflatten(f);
            dense.points[f] += drift_at(cfg.drift_amplitude, &drift_phases[view], u, v, w, h);
        }
    }

    let init_cameras = gt_cameras
        .iter()
        .map(|c| {
            let axis = vec3(rng_init.unit_vector());
            let dir = vec3(rng_init.unit_vector());
            let q = UnitQuaternion::from_scaled_axis(axis * cfg.init_rot_deg.to_radians()) * c.q;
            CameraParams {
                q,
                t: c.t + dir * (cfg.init_trans_frac * c.t.norm()),
                intrinsics: c.intrinsics,
            }
        })
        .collect();

    Ok(SyntheticScene {
        config: cfg.clone(),
        gt_cameras,
        init_cameras,
        gt_points,
        gt_anchors,
        gt_map,
        gt_depth,
        graph,
        dense,
        drift_phases,
        n_outliers,
    })
}
