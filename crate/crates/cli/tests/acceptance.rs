//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use ggsfm::align::{robust_umeyama, umeyama, RansacConfig, Sim3};
use ggsfm::ba::{self, BAProblem, RobustLoss, SolveOptions};
use ggsfm::eval::{auc_from_curve, point_auc, recall_curve, Unit};
use ggsfm::io;
use ggsfm::matching::{
    build_tracks, confidence_masks, cycle_filter, select_ba_anchors, CorrGraph, Observation, SaliencyMap, Track,
};
use ggsfm::pipeline::{run_pipeline, PipelineConfig};
use ggsfm::refine::{confidence, loss_conf, loss_conf_grad, loss_id, scene_radius};
use ggsfm::rng::SceneRng;
use ggsfm::scene::{CameraParams, Intrinsics, PixelCoord, PointMapSet};
use ggsfm::synth::{generate, SynthConfig};
use ggsfm::triangulate::{dlt_point, triangulate_all, triangulate_tracks, AngleAggregate, TriangulationConfig};
use ggsfm::Camera;

const BIN: &str = env!("CARGO_BIN_EXE_ggsfm");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run_bin(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn metrics(path: &Path) -> BTreeMap<String, f64> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| v.parse().ok().map(|v| (k.to_string(), v)))
        .collect()
}

fn rotation_deg(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Largest geodesic error of the relative rotations over all ordered pairs.
fn max_relative_rotation_error(pred: &[Camera], gt: &[Camera]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if i != j {
                let rp = pred[j].rotation() * pred[i].rotation().transpose();
                let rg = gt[j].rotation() * gt[i].rotation().transpose();
                worst = worst.max(rotation_deg(&(rp.transpose() * rg)));
            }
        }
    }
    worst
}

fn ba_tracks(scene: &ggsfm::synth::SyntheticScene) -> (Vec<Track<f64>>, Vec<Vector3<f64>>) {
    let d = PipelineConfig::default().matching;
    let filtered = cycle_filter(&scene.graph, d.eps);
    let (g_ba, _) = confidence_masks(&filtered, d.eps_ba, d.eps_dlt).unwrap();
    let sal = SaliencyMap::uniform(g_ba.n_views, g_ba.height, g_ba.width);
    let tracks = select_ba_anchors(&build_tracks(&g_ba), &sal, d.n_ba);
    let pts = tracks
        .iter()
        .map(|t| scene.dense.points[scene.dense.index(t.anchor_view, t.anchor.1, t.anchor.0)])
        .collect();
    (tracks, pts)
}

// 1. noiseless end to end
fn criterion_1(dir: &Path) -> Outcome {
    let scene_dir = dir.join("c1");
    let (ok, _, err) = run_bin(&["synth", "--out-dir", scene_dir.to_str().unwrap()]);
    if !ok {
        return outcome(false, format!("synth failed: {err}"));
    }
    let run = scene_dir.join("run");
    let t0 = Instant::now();
    let (ok, _, err) = run_bin(&[
        "--threads",
        "1",
        "pipeline",
        "--config",
        scene_dir.join("pipeline.toml").to_str().unwrap(),
        "--set",
        "ba.fix_intrinsics=true",
    ]);
    let secs = t0.elapsed().as_secs_f64();
    if !ok {
        return outcome(false, format!("pipeline failed: {err}"));
    }
    let pose_auc5 = metrics(&run.join("metrics.txt")).get("pose_auc@5").copied().unwrap_or(0.0);

    let scene = generate(&SynthConfig::default()).unwrap();
    let cams = io::read_cameras(&run.join("cameras.txt")).unwrap();
    let rot_err = max_relative_rotation_error(&cams, &scene.gt_cameras);
    let graph: CorrGraph<f64> = io::read_corr(&run.join("matches_dlt.corr")).unwrap();
    let cloud = triangulate_all(&graph, &cams, &TriangulationConfig::default()).unwrap();
    let on_disk = io::read_cloud(&run.join("cloud.txt")).unwrap();
    if on_disk != cloud.points {
        return outcome(false, "cloud artifact differs from re-triangulation".into());
    }
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (x, a) in cloud.points.iter().zip(&cloud.anchors) {
        let j = scene.point_at_anchor(&a.expect("anchor known")).expect("anchor is a scene point");
        src.push(*x);
        dst.push(scene.gt_points[j]);
    }
    let sim = umeyama(&src, &dst).unwrap();
    let radius = scene_radius(&scene.gt_points).unwrap();
    let tol = 1e-6 * radius;
    let worst = src.iter().zip(&dst).map(|(s, d)| (sim.apply(s) - d).norm()).fold(0.0, f64::max);
    let recall = src.iter().zip(&dst).filter(|(s, d)| (sim.apply(s) - *d).norm() < tol).count() as f64 / src.len() as f64;
    let pass = pose_auc5 > 0.999 && recall == 1.0 && secs < 10.0;
    outcome(
        pass,
        format!(
            "pose AUC@5={pose_auc5} (max rel. rot {rot_err:.2e} deg), point recall@{tol:.2e}={recall} over {} points (worst {worst:.2e}), {secs:.2}s single-threaded",
            src.len()
        ),
    )
}

fn c2_config(seed: u64) -> SynthConfig {
    SynthConfig {
        height: 192,
        width: 256,
        focal: 320.0,
        n_points: 4000,
        noise_px: 0.5,
        outlier_fraction: 0.1,
        init_rot_deg: 2.0,
        init_trans_frac: 0.05,
        seed,
        ..Default::default()
    }
}

// 2. robust BA beats least squares
fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut cauchy_secs = 0.0;
    let mut rows = Vec::new();
    let mut pass = true;
    for seed in 0..10 {
        let scene = generate(&c2_config(seed)).unwrap();
        let (tracks, pts) = ba_tracks(&scene);
        let mut errs = [0.0; 2];
        for (slot, loss) in [RobustLoss::Cauchy { scale: 1.0 }, RobustLoss::Squared].into_iter().enumerate() {
            let mut p = BAProblem::new(scene.init_cameras.clone(), pts.clone(), tracks.clone());
            p.loss = loss;
            p.fix_intrinsics = true;
            let t = Instant::now();
            let (cams, _, _) = ba::solve(&p, &SolveOptions::default()).unwrap();
            if slot == 0 {
                cauchy_secs += t.elapsed().as_secs_f64();
            }
            errs[slot] = max_relative_rotation_error(&cams, &scene.gt_cameras);
        }
        pass &= errs[0] < 0.2 && errs[0] < errs[1];
        rows.push(format!("{:.3}/{:.1}", errs[0], errs[1]));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= cauchy_secs < 30.0;
    outcome(
        pass,
        format!(
            "cauchy/LS max rel. rot deg per seed [{}], cauchy BA {cauchy_secs:.2}s ({secs:.2}s including scene generation and LS baseline)",
            rows.join(" ")
        ),
    )
}

fn look_at(center: Vector3<f64>, target: Vector3<f64>, k: Intrinsics<f64>) -> Camera {
    let z = (target - center).normalize();
    let up = if z.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let q = UnitQuaternion::from_matrix(&r);
    CameraParams {
        q,
        t: -(q * center),
        intrinsics: k,
    }
}

fn project_oracle(c: &Camera, x: &Vector3<f64>) -> Option<(f64, f64)> {
    let p = c.rotation() * x + c.t;
    if p.z <= 0.0 {
        return None;
    }
    let k = &c.intrinsics;
    Some((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Gauss-Newton on the summed squared reprojection error, numeric Jacobian.
fn gauss_newton(cams: &[Camera], track: &Track<f64>, start: Vector3<f64>) -> Vector3<f64> {
    let resid = |x: &Vector3<f64>| -> Vec<f64> {
        track
            .obs
            .iter()
            .flat_map(|o| {
                let (u, v) = project_oracle(&cams[o.view], x).unwrap_or((1e6, 1e6));
                [u - o.pix.u, v - o.pix.v]
            })
            .collect()
    };
    let mut x = start;
    for _ in 0..50 {
        let r = resid(&x);
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        let h = 1e-6;
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                let mut xp = x;
                let mut xm = x;
                xp[a] += h;
                xm[a] -= h;
                resid(&xp).iter().zip(resid(&xm)).map(|(p, m)| (p - m) / (2.0 * h)).collect()
            })
            .collect();
        for i in 0..r.len() {
            let row = Vector3::new(cols[0][i], cols[1][i], cols[2][i]);
            jtj += row * row.transpose();
            jtr += row * r[i];
        }
        let Some(step) = jtj.lu().solve(&-jtr) else { break };
        x += step;
        if step.norm() < 1e-15 * (1.0 + x.norm()) {
            break;
        }
    }
    x
}

fn random_rig(rng: &mut SceneRng, n: usize, k: Intrinsics<f64>) -> Vec<Camera> {
    (0..n)
        .map(|_| {
            let d = Vector3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
            let target = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.1;
            look_at(d * rng.uniform_range(4.0, 6.0), target, k)
        })
        .collect()
}

fn track_of(cams: &[Camera], x: &Vector3<f64>, noise: f64, rng: &mut SceneRng) -> Option<Track<f64>> {
    let mut obs = Vec::new();
    for (view, c) in cams.iter().enumerate() {
        let (u, v) = project_oracle(c, x)?;
        obs.push(Observation {
            view,
            pix: PixelCoord::new(u + noise * rng.normal(), v + noise * rng.normal()),
        });
    }
    let (u, v) = (obs[0].pix.u.round().max(0.0) as usize, obs[0].pix.v.round().max(0.0) as usize);
    Some(Track {
        anchor_view: 0,
        anchor: (u, v),
        obs,
        saliency: 0.0,
    })
}

// 3. DLT against a nonlinear oracle
fn criterion_3() -> Outcome {
    let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
    let mut rng = SceneRng::new(33);
    let mut worst: f64 = 0.0;
    let (mut ss_dlt, mut ss_gn, mut n_obs) = (0.0, 0.0, 0usize);
    let mut count = 0;
    while count < 500 {
        let n = 2 + (rng.uniform() * 5.0) as usize;
        let cams = random_rig(&mut rng, n, k);
        let x = Vector3::new(rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0));
        let Some(clean) = track_of(&cams, &x, 0.0, &mut rng) else { continue };
        let Some(noisy) = track_of(&cams, &x, 0.5, &mut rng) else { continue };
        count += 1;
        let start = x + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.01;
        let (dlt, _) = dlt_point(&clean, &cams).unwrap();
        worst = worst.max((dlt - gauss_newton(&cams, &clean, start)).norm());

        let (dlt, _) = dlt_point(&noisy, &cams).unwrap();
        let gn = gauss_newton(&cams, &noisy, x);
        for o in &noisy.obs {
            let sq = |p: &Vector3<f64>| {
                let (u, v) = project_oracle(&cams[o.view], p).unwrap();
                (u - o.pix.u).powi(2) + (v - o.pix.v).powi(2)
            };
            ss_dlt += sq(&dlt);
            ss_gn += sq(&gn);
            n_obs += 1;
        }
    }
    let rms_dlt = (ss_dlt / n_obs as f64).sqrt();
    let rms_gn = (ss_gn / n_obs as f64).sqrt();
    let pass = worst < 1e-7 && rms_dlt <= 1.05 * rms_gn;
    outcome(
        pass,
        format!(
            "noiseless max |DLT - GN| = {worst:.2e}; noisy RMS DLT {rms_dlt:.4} px vs GN {rms_gn:.4} px (ratio {:.4})",
            rms_dlt / rms_gn
        ),
    )
}

fn random_graph(rng: &mut SceneRng, n: usize) -> CorrGraph<f64> {
    let (h, w) = (8, 8);
    let mut g = CorrGraph::new(n, h, w);
    for i in 0..n {
        for k in 0..n {
            if i == k {
                continue;
            }
            let p = g.pair_mut(i, k);
            for px in 0..h * w {
                p.target[px] = PixelCoord::new(rng.uniform_range(-1.5, 8.5), rng.uniform_range(-1.5, 8.5));
                p.conf[px] = rng.uniform();
                p.valid[px] = rng.uniform() < 0.8;
            }
        }
    }
    // make a share of the cycles close
    for i in 0..n {
        for k in 0..n {
            if i == k {
                continue;
            }
            for px in 0..h * w {
                if rng.uniform() < 0.5 {
                    let t = g.pair(i, k).target[px];
                    let (u, v) = (t.u.round(), t.v.round());
                    if (0.0..8.0).contains(&u) && (0.0..8.0).contains(&v) {
                        let back = (v as usize) * w + u as usize;
                        let start = PixelCoord::new((px % w) as f64 + rng.normal() * 3.0, (px / w) as f64 + rng.normal() * 3.0);
                        g.pair_mut(k, i).target[back] = start;
                    }
                }
            }
        }
    }
    g
}

fn filter_oracle(g: &CorrGraph<f64>, eps: f64) -> Vec<bool> {
    let (h, w) = (g.height, g.width);
    let mut keep = Vec::new();
    for i in 0..g.n_views {
        for k in 0..g.n_views {
            if i == k {
                continue;
            }
            for px in 0..h * w {
                let fwd = g.pair(i, k);
                let ok = fwd.valid[px] && {
                    let t = fwd.target[px];
                    let (u, v) = (t.u.round(), t.v.round());
                    if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                        false
                    } else {
                        let b = g.pair(k, i).target[v as usize * w + u as usize];
                        let (du, dv) = (b.u - (px % w) as f64, b.v - (px / w) as f64);
                        (du * du + dv * dv).sqrt() < eps
                    }
                };
                keep.push(ok);
            }
        }
    }
    keep
}

fn flat_valid(g: &CorrGraph<f64>) -> Vec<bool> {
    let mut out = Vec::new();
    for i in 0..g.n_views {
        for k in 0..g.n_views {
            if i != k {
                out.extend_from_slice(&g.pair(i, k).valid);
            }
        }
    }
    out
}

fn angle_oracle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

// 4. filters against per-element brute force
fn criterion_4() -> Outcome {
    let mut rng = SceneRng::new(44);
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for trial in 0..20 {
        let n = 3 + trial % 3;
        let g = random_graph(&mut rng, n);
        for eps in [0.5, 1.0, 4.0] {
            let got = flat_valid(&cycle_filter(&g, eps));
            let want = filter_oracle(&g, eps);
            mismatches += got.iter().zip(&want).filter(|(a, b)| a != b).count();
            checked += got.len();
        }
        let filtered = cycle_filter(&g, 4.0);
        let (ba_g, dlt_g) = confidence_masks(&filtered, 0.6, 0.1).unwrap();
        let base = flat_valid(&filtered);
        let mut conf = Vec::new();
        for i in 0..n {
            for k in 0..n {
                if i != k {
                    conf.extend_from_slice(&filtered.pair(i, k).conf);
                }
            }
        }
        for (got, thr) in [(flat_valid(&ba_g), 0.6), (flat_valid(&dlt_g), 0.1)] {
            for ((&v, &c), &gv) in base.iter().zip(&conf).zip(&got) {
                mismatches += ((v && c > thr) != gv) as usize;
                checked += 1;
            }
        }
    }

    // reprojection and angle filters on an 8x8 image
    let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5);
    for trial in 0..20 {
        let n = 3 + trial % 4;
        let cams = random_rig(&mut rng, n, k);
        let mut tracks = Vec::new();
        while tracks.len() < 200 {
            let x = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.5;
            let noise = [0.0, 0.5, 3.0, 8.0][tracks.len() % 4];
            if let Some(mut t) = track_of(&cams, &x, noise, &mut rng) {
                let keep = 2 + (rng.uniform() * (n - 1) as f64) as usize;
                t.obs.truncate(keep.min(n));
                tracks.push(t);
            }
        }
        for (agg, min_angle) in [(AngleAggregate::Max, 3.0), (AngleAggregate::Max, 20.0), (AngleAggregate::Min, 10.0)] {
            let cfg = TriangulationConfig {
                max_reproj: 4.0,
                min_angle,
                aggregate: agg,
            };
            let cloud = triangulate_tracks(&tracks, &cams, n, 8, 8, &cfg).unwrap();
            let mut got = cloud.points.iter();
            for t in &tracks {
                let want = dlt_point(t, &cams).ok().and_then(|(x, _)| {
                    let mut max_err: f64 = 0.0;
                    let mut links = 0;
                    for o in &t.obs {
                        match project_oracle(&cams[o.view], &x) {
                            Some((u, v)) => {
                                max_err = max_err.max(((u - o.pix.u).powi(2) + (v - o.pix.v).powi(2)).sqrt());
                                let (ru, rv) = (u.round(), v.round());
                                links += (ru >= 0.0 && rv >= 0.0 && ru < 8.0 && rv < 8.0) as usize;
                            }
                            None => max_err = f64::INFINITY,
                        }
                    }
                    let mut angles = Vec::new();
                    for a in 0..t.obs.len() {
                        for b in a + 1..t.obs.len() {
                            angles.push(angle_oracle(
                                &(cams[t.obs[a].view].center() - x),
                                &(cams[t.obs[b].view].center() - x),
                            ));
                        }
                    }
                    let angle = match agg {
                        AngleAggregate::Max => angles.iter().cloned().fold(f64::MIN, f64::max),
                        AngleAggregate::Min => angles.iter().cloned().fold(f64::MAX, f64::min),
                    };
                    (max_err <= 4.0 && angle >= min_angle && links >= 2).then_some(x)
                });
                checked += 1;
                if let Some(x) = want {
                    mismatches += (got.next() != Some(&x)) as usize;
                }
            }
            mismatches += got.count();
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over {checked} element decisions"))
}

fn random_sim(rng: &mut SceneRng) -> Sim3<f64> {
    let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
    Sim3::new(
        rng.uniform_range(0.2, 5.0),
        UnitQuaternion::from_scaled_axis(axis.normalize() * rng.uniform_range(0.0, 3.1)),
        Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 3.0,
    )
}

fn sim_error(a: &Sim3<f64>, b: &Sim3<f64>) -> f64 {
    (a.matrix() - b.matrix()).abs().max()
}

// 5. Umeyama exact and robust recovery
fn criterion_5() -> Outcome {
    let mut rng = SceneRng::new(55);
    let mut worst_exact: f64 = 0.0;
    for _ in 0..1000 {
        let m = random_sim(&mut rng);
        let n = 3 + (rng.uniform() * 50.0) as usize;
        let src: Vec<_> = (0..n).map(|_| Vector3::new(rng.normal(), rng.normal(), rng.normal())).collect();
        let dst: Vec<_> = src.iter().map(|x| m.apply(x)).collect();
        worst_exact = worst_exact.max(sim_error(&umeyama(&src, &dst).unwrap(), &m));
    }
    let mut worst_robust: f64 = 0.0;
    let mut exact_sets = 0;
    for seed in 0..20 {
        let m = random_sim(&mut rng);
        let n = 200;
        let src: Vec<_> = (0..n).map(|_| Vector3::new(rng.normal(), rng.normal(), rng.normal())).collect();
        let planted: Vec<bool> = (0..n).map(|i| i % 10 >= 3).collect();
        let dst: Vec<_> = src
            .iter()
            .zip(&planted)
            .map(|(x, &inlier)| {
                let y = m.apply(x);
                if inlier {
                    y
                } else {
                    y + Vector3::new(rng.normal(), rng.normal(), rng.normal()).normalize() * rng.uniform_range(0.5, 3.0)
                }
            })
            .collect();
        let cfg = RansacConfig {
            min_inlier_ratio: 0.6,
            seed,
            ..Default::default()
        };
        let (est, inliers) = robust_umeyama(&src, &dst, &cfg).unwrap();
        worst_robust = worst_robust.max(sim_error(&est, &m));
        exact_sets += (inliers == planted) as usize;
    }
    let pass = worst_exact < 1e-10 && worst_robust < 1e-6 && exact_sets == 20;
    outcome(
        pass,
        format!("exact max error {worst_exact:.2e} over 1000; robust max error {worst_robust:.2e}, exact inlier set {exact_sets}/20"),
    )
}

// 6. refinement improves drifted dense maps
fn criterion_6(dir: &Path) -> Outcome {
    let t0 = Instant::now();
    let base = SynthConfig {
        n_points: 9000,
        backdrop: true,
        seed: 6,
        ..Default::default()
    };
    let radius = scene_radius(&generate(&base).unwrap().gt_points).unwrap();
    let cfg = SynthConfig {
        drift_amplitude: 0.02 * radius,
        ..base
    };
    let scene = generate(&cfg).unwrap();
    let d = dir.join("c6");
    std::fs::create_dir_all(&d).unwrap();
    io::write_cameras(&d.join("cams.txt"), &scene.init_cameras).unwrap();
    io::write_cameras(&d.join("gt_cams.txt"), &scene.gt_cameras).unwrap();
    io::write_pointmap(&d.join("dense.pmap"), &scene.dense).unwrap();
    io::write_pointmap(&d.join("gt.pmap"), &scene.gt_map).unwrap();
    io::write_corr(&d.join("m.corr"), &scene.graph).unwrap();
    let mut pc = PipelineConfig {
        seed: 6,
        out_dir: d.join("run"),
        ..Default::default()
    };
    pc.inputs.cameras = d.join("cams.txt");
    pc.inputs.dense = d.join("dense.pmap");
    pc.inputs.matches = vec![d.join("m.corr")];
    pc.inputs.gt_dense = Some(d.join("gt.pmap"));
    pc.ba.fix_intrinsics = true;
    pc.eval.unit = (0.01 * radius).to_string();
    pc.eval.taus = vec![1];
    pc.eval.align_max_err = 0.05 * radius;
    let out = match run_pipeline(&pc) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let secs = t0.elapsed().as_secs_f64();
    let auc = |m: &Option<ggsfm::eval::MetricReport>| m.as_ref().and_then(|r| r.auc_at.first()).map_or(0.0, |a| a.1);
    let (refined_auc, input_auc) = (auc(&out.metrics), auc(&out.input_metrics));
    let cloud = out.cloud.as_ref().unwrap();
    let refined = out.refined.as_ref().unwrap();
    let n_valid = scene.dense.valid.iter().filter(|&&v| v).count();
    let coverage = cloud.guides().len() as f64 / n_valid as f64;
    let (mut pred, mut links) = (Vec::new(), Vec::new());
    for g in cloud.guides() {
        pred.push(refined.points[refined.index(g.pixel.view, g.pixel.v, g.pixel.u)]);
        links.push(Some(g.position));
    }
    let id_loss = loss_id(&pred, &links);
    // displacements are fused through the normalized patch frame, so a guided
    // pixel can land a few ulps off its guide
    let worst_id = pred.iter().zip(&links).map(|(p, g)| (p - g.unwrap()).norm()).fold(0.0, f64::max);
    let pass = refined_auc - input_auc >= 0.2 && worst_id <= 1e-12 * radius && secs < 20.0;
    outcome(
        pass,
        format!(
            "AUC@(1% radius) input {input_auc:.4} -> refined {refined_auc:.4} (+{:.4}), guide coverage {:.1}% of valid pixels ({:.1}% of all), loss_id at {} guided pixels {id_loss:.1e} (max {:.1e} radius), {secs:.2}s",
            refined_auc - input_auc,
            100.0 * coverage,
            100.0 * cloud.coverage(),
            pred.len(),
            worst_id / radius
        ),
    )
}

// 7. loss correctness
fn criterion_7() -> Outcome {
    let alpha = 0.2;
    let mut worst_opt: f64 = 0.0;
    for &e in &[0.01, 0.02, 0.05, 0.1, 0.15] {
        let one = |c: f64| loss_conf(&[Vector3::new(e, 0.0, 0.0)], &[c], &[Vector3::zeros()], alpha);
        let step = 1e-5;
        let mut best = (f64::INFINITY, 1.0);
        let mut c = 1.0;
        while c < 2.0 * alpha / e {
            let l = one(c);
            if l < best.0 {
                best = (l, c);
            }
            c += step;
        }
        worst_opt = worst_opt.max((best.1 - alpha / e).abs());
    }
    // alpha / e <= 1: loss increases on the whole domain
    let e = 0.5;
    let one = |c: f64| loss_conf(&[Vector3::new(0.0, e, 0.0)], &[c], &[Vector3::zeros()], alpha);
    let monotone = (0..1000).all(|i| one(1.0 + i as f64 * 0.01) < one(1.0 + (i + 1) as f64 * 0.01));

    let mut rng = SceneRng::new(77);
    let mut worst_grad: f64 = 0.0;
    for _ in 0..50 {
        let n = 1 + (rng.uniform() * 6.0) as usize;
        let pred: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.normal(), rng.normal(), rng.normal())).collect();
        let gt: Vec<Vector3<f64>> = pred.iter().map(|p| p + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.5).collect();
        let conf: Vec<f64> = (0..n).map(|_| confidence(rng.normal())).collect();
        let grad = loss_conf_grad(&pred, &conf, &gt);
        let h = 1e-6;
        for i in 0..n {
            for a in 0..3 {
                let mut p = pred.clone();
                p[i][a] += h;
                let lp = loss_conf(&p, &conf, &gt, alpha);
                p[i][a] -= 2.0 * h;
                let lm = loss_conf(&p, &conf, &gt, alpha);
                let fd = (lp - lm) / (2.0 * h);
                worst_grad = worst_grad.max((fd - grad[i][a]).abs() / grad[i][a].abs().max(1e-3));
            }
            let mut c = conf.clone();
            c[i] += h;
            let lp = loss_conf(&pred, &c, &gt, alpha);
            c[i] -= 2.0 * h;
            let lm = loss_conf(&pred, &c, &gt, alpha);
            let fd = (lp - lm) / (2.0 * h);
            let analytic = (pred[i] - gt[i]).norm() - alpha / conf[i];
            worst_grad = worst_grad.max((fd - analytic).abs() / analytic.abs().max(1e-3));
        }
    }
    let anchors = confidence(0.0) == 2.0 && confidence(3f64.ln()) == 4.0 && confidence(-1e300) == 1.0 + (-30f64).exp();
    let pass = worst_opt <= 1e-4 && monotone && worst_grad <= 1e-5 && anchors;
    outcome(
        pass,
        format!(
            "c* grid error {worst_opt:.1e}, monotone for alpha/e<1: {monotone}, max gradient rel. error {worst_grad:.1e}, confidence anchors exact: {anchors}"
        ),
    )
}

// 8. metric formulas
fn criterion_8() -> Outcome {
    let mut rng = SceneRng::new(88);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = 1 + (rng.uniform() * 500.0) as usize;
        let tau = 1 + (rng.uniform() * 10.0) as usize;
        let errors: Vec<f64> = (0..n)
            .map(|_| {
                let e = rng.uniform() * 12.0;
                if rng.uniform() < 0.2 {
                    e.floor()
                } else {
                    e
                }
            })
            .collect();
        let curve = recall_curve(&errors, tau);
        let mut sum = 0.0;
        for k in 1..=tau {
            let r = errors.iter().filter(|&&e| e < k as f64).count() as f64 / n as f64;
            mismatches += (curve[k - 1] != (k, r)) as usize;
            sum += r;
        }
        mismatches += (auc_from_curve(&curve, tau) != sum / tau as f64) as usize;
    }

    // half the pixels offset by 1.5 units in opposite pairs, so the
    // similarity fit is the identity
    let (h, w) = (4, 8);
    let mut gt = PointMapSet::<f64>::empty(1, h, w);
    for v in 0..h {
        for u in 0..w {
            let f = gt.index(0, v, u);
            gt.points[f] = Vector3::new((u / 2) as f64 * 10.0, v as f64 * 10.0, ((u / 2 + v) % 3) as f64 * 10.0);
            gt.valid[f] = true;
        }
    }
    let mut pred = gt.clone();
    for v in (0..h).step_by(2) {
        for u in (0..w).step_by(2) {
            let dir = Vector3::new(0.0, 0.0, 1.5);
            let (a, b) = (pred.index(0, v, u), pred.index(0, v, u + 1));
            pred.points[a] += dir;
            pred.points[b] -= dir;
        }
    }
    let cfg = RansacConfig {
        max_err: 2.0,
        ..Default::default()
    };
    let (report, _) = point_auc(&pred, &gt, &[2], Unit::Custom(1.0), &cfg).unwrap();
    let half = report.recall_at == vec![(1, 0.5), (2, 1.0)] && report.auc_at == vec![(2, 0.75)];
    outcome(
        mismatches == 0 && half,
        format!(
            "{mismatches} mismatches against brute force; half-offset recall {:?} auc {:?}",
            report.recall_at, report.auc_at
        ),
    )
}

fn tree_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name() != "manifest.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

// 9. determinism across runs and thread counts
fn criterion_9(dir: &Path) -> Outcome {
    let scene_dir = dir.join("c9");
    let (ok, _, err) = run_bin(&["synth", "--out-dir", scene_dir.to_str().unwrap(), "--seed", "9"]);
    if !ok {
        return outcome(false, format!("synth failed: {err}"));
    }
    let config = scene_dir.join("pipeline.toml");
    let mut runs = Vec::new();
    for (i, threads) in ["1", "1", "4"].iter().enumerate() {
        let out = scene_dir.join(format!("run{i}"));
        let (ok, _, err) = run_bin(&[
            "--threads",
            threads,
            "pipeline",
            "--config",
            config.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        if !ok {
            return outcome(false, format!("pipeline failed: {err}"));
        }
        runs.push(tree_files(&out));
    }
    let same = runs[0] == runs[1] && runs[0] == runs[2];
    outcome(
        same && runs[0].len() > 5,
        format!("{} artifacts bit-identical across 2 single-threaded runs and a 4-thread run: {same}", runs[0].len()),
    )
}

// 10. defaults audit
fn criterion_10() -> Outcome {
    let (ok, text, _) = run_bin(&["print-defaults"]);
    let values: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once(" = ")).collect();
    let expected = [
        ("eps", "4"),
        ("eps_ba", "0.6"),
        ("eps_dlt", "0.1"),
        ("n_ba", "2048"),
        ("max_reproj_px", "4"),
        ("min_angle_deg", "3"),
        ("lambda_id", "1"),
        ("alpha", "0.2"),
        ("budget", "400000"),
        ("patch_ratio", "0.2"),
    ];
    let wrong: Vec<_> = expected.iter().filter(|(k, v)| values.get(k) != Some(v)).map(|(k, _)| *k).collect();
    outcome(ok && wrong.is_empty(), format!("{} keys checked, mismatched: {wrong:?}", expected.len()))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let dir: PathBuf = tmp.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("noiseless end-to-end", Box::new(|| criterion_1(&dir))),
        ("robust BA", Box::new(criterion_2)),
        ("DLT vs nonlinear oracle", Box::new(criterion_3)),
        ("filter fidelity", Box::new(criterion_4)),
        ("Umeyama", Box::new(criterion_5)),
        ("refinement improves drifted maps", Box::new(|| criterion_6(&dir))),
        ("loss correctness", Box::new(criterion_7)),
        ("metric formulas", Box::new(criterion_8)),
        ("determinism", Box::new(|| criterion_9(&dir))),
        ("defaults audit", Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += !o.pass as usize;
        println!("{} criterion {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
