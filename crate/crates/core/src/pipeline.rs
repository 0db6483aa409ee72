//! End-to-end orchestration: matching masks, sparse BA, triangulation,
//! dense refinement and evaluation, with every intermediate written to disk.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{umeyama, RansacConfig};
use crate::ba::{self, BAProblem, RobustLoss, SolveOptions};
use crate::error::{GeomError, IoError};
use crate::eval::{chamfer, point_auc, pose_auc, MetricReport, Unit};
use crate::io;
use crate::matching::{build_tracks, confidence_masks, cycle_filter, ensemble, select_ba_anchors, SaliencyMap};
use crate::refine::{refine_dense, BaselineRefiner, ExternRefiner, PatchConfig, PatchMode, Refiner};
use crate::scene::PointMapSet;
use crate::triangulate::{triangulate_all, AngleAggregate, TriangulationConfig};

/// Stage names in execution order; a failure exits with `index + 1`.
pub const STAGES: [&str; 6] = ["init", "matching", "ba", "triangulate", "refine", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub ba: bool,
    pub refine: bool,
    pub eval: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            ba: true,
            refine: true,
            eval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub cameras: PathBuf,
    pub dense: PathBuf,
    /// One or two correspondence files; two are ensembled.
    pub matches: Vec<PathBuf>,
    pub saliency: Option<PathBuf>,
    pub gt_dense: Option<PathBuf>,
    pub gt_cameras: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    pub eps: f64,
    pub eps_ba: f64,
    pub eps_dlt: f64,
    pub n_ba: usize,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            eps: 4.0,
            eps_ba: 0.6,
            eps_dlt: 0.1,
            n_ba: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaConfig {
    pub cauchy_scale: f64,
    pub fix_intrinsics: bool,
    pub max_iters: usize,
    pub tol: f64,
    pub damping_init: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        let s = SolveOptions::default();
        Self {
            cauchy_scale: 1.0,
            fix_intrinsics: false,
            max_iters: s.max_iters,
            tol: s.tol,
            damping_init: s.damping_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriangulateConfig {
    pub max_reproj: f64,
    pub min_angle: f64,
    pub aggregate: String,
}

impl Default for TriangulateConfig {
    fn default() -> Self {
        let t = TriangulationConfig::default();
        Self {
            max_reproj: t.max_reproj,
            min_angle: t.min_angle,
            aggregate: t.aggregate.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub patch_ratio: f64,
    pub budget: usize,
    /// `baseline` or `extern:<command>`.
    pub refiner: String,
    pub lambda_id: f64,
    pub alpha: f64,
    pub knn: usize,
    pub idw_power: f64,
    pub conf_decay: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        let b = BaselineRefiner::default();
        Self {
            patch_ratio: 0.2,
            budget: 400_000,
            refiner: "baseline".into(),
            lambda_id: 1.0,
            alpha: 0.2,
            knn: b.k,
            idw_power: b.power,
            conf_decay: b.decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `m`, `cm`, `mm` or a length in scene units.
    pub unit: String,
    pub taus: Vec<usize>,
    pub pose_deg: Vec<f64>,
    pub align_max_err: f64,
    pub align_min_inlier_ratio: f64,
    pub chamfer_dist: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let r = RansacConfig::default();
        Self {
            unit: "cm".into(),
            taus: vec![1, 5],
            pose_deg: vec![1.0, 5.0, 10.0],
            align_max_err: r.max_err,
            align_min_inlier_ratio: r.min_inlier_ratio,
            chamfer_dist: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub stages: Stages,
    pub inputs: Inputs,
    pub matching: MatchingConfig,
    pub ba: BaConfig,
    pub triangulate: TriangulateConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, GeomError> {
        toml::from_str(s).map_err(|e| GeomError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let m = &self.matching;
        if m.eps_ba <= m.eps_dlt {
            return Err(GeomError::ThresholdOrder {
                eps_ba: m.eps_ba,
                eps_dlt: m.eps_dlt,
            });
        }
        if self.inputs.matches.is_empty() || self.inputs.matches.len() > 2 {
            return Err(GeomError::Config("inputs.matches needs one or two files".into()));
        }
        self.triangulation()?;
        self.refiner()?;
        self.unit()?;
        Ok(())
    }

    pub fn triangulation(&self) -> Result<TriangulationConfig, GeomError> {
        let aggregate: AngleAggregate = self
            .triangulate
            .aggregate
            .parse()
            .map_err(|_| GeomError::Config(format!("unknown angle aggregate `{}`", self.triangulate.aggregate)))?;
        Ok(TriangulationConfig {
            max_reproj: self.triangulate.max_reproj,
            min_angle: self.triangulate.min_angle,
            aggregate,
        })
    }

    pub fn refiner(&self) -> Result<Box<dyn Refiner<f64>>, GeomError> {
        let r = &self.refine;
        match r.refiner.as_str() {
            "baseline" => Ok(Box::new(BaselineRefiner {
                k: r.knn,
                power: r.idw_power,
                decay: r.conf_decay,
            })),
            s => match s.strip_prefix("extern:") {
                Some(cmd) if !cmd.trim().is_empty() => Ok(Box::new(ExternRefiner { command: cmd.to_string() })),
                _ => Err(GeomError::Config(format!("unknown refiner `{s}`"))),
            },
        }
    }

    pub fn unit(&self) -> Result<Unit, GeomError> {
        self.eval.unit.parse()
    }

    pub fn ransac(&self) -> RansacConfig {
        RansacConfig {
            max_err: self.eval.align_max_err,
            min_inlier_ratio: self.eval.align_min_inlier_ratio,
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// The headline defaults, one `key = value` per line.
pub fn defaults_text() -> String {
    let c = PipelineConfig::default();
    let t = c.triangulation().expect("default aggregate parses");
    [
        ("eps", c.matching.eps.to_string()),
        ("eps_ba", c.matching.eps_ba.to_string()),
        ("eps_dlt", c.matching.eps_dlt.to_string()),
        ("n_ba", c.matching.n_ba.to_string()),
        ("max_reproj_px", t.max_reproj.to_string()),
        ("min_angle_deg", t.min_angle.to_string()),
        ("angle_aggregate", t.aggregate.to_string()),
        ("cauchy_scale_px", c.ba.cauchy_scale.to_string()),
        ("lambda_id", c.refine.lambda_id.to_string()),
        ("alpha", c.refine.alpha.to_string()),
        ("budget", c.refine.budget.to_string()),
        ("patch_ratio", c.refine.patch_ratio.to_string()),
        ("ba_max_iters", c.ba.max_iters.to_string()),
        ("ba_tol", c.ba.tol.to_string()),
        ("ba_damping_init", c.ba.damping_init.to_string()),
    ]
    .iter()
    .map(|(k, v)| format!("{k} = {v}\n"))
    .collect()
}

/// A failed stage and its exit code.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: &'static str,
    pub code: i32,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl StageError {
    fn new(index: usize, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self {
            stage: STAGES[index],
            code: index as i32 + 1,
            source: source.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineOutcome {
    pub cameras: Vec<crate::Camera>,
    pub ba_report: Option<ba::BAReport>,
    pub n_tracks: usize,
    pub n_ba_tracks: usize,
    pub n_guides: usize,
    pub cloud: Option<crate::Cloud>,
    pub refined: Option<PointMapSet<f64>>,
    /// Metrics of the refined (or aligned input) map, then of the input map.
    pub metrics: Option<MetricReport>,
    pub input_metrics: Option<MetricReport>,
    pub stage_seconds: Vec<(&'static str, f64)>,
    pub artifacts: Vec<PathBuf>,
}

struct Run<'a> {
    out: &'a Path,
    artifacts: Vec<PathBuf>,
}

impl Run<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.artifacts.push(p.clone());
        p
    }
}

/// Runs every enabled stage and writes artifacts plus `manifest.json` into
/// `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome, StageError> {
    let mut outcome = PipelineOutcome::default();
    let mut clock = Instant::now();
    let mut lap = |outcome: &mut PipelineOutcome, i: usize| {
        outcome.stage_seconds.push((STAGES[i], clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let init = |e: GeomError| StageError::new(0, e);
    let io_err = |i: usize| move |e: IoError| StageError::new(i, e);

    // init
    cfg.validate().map_err(init)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| StageError::new(0, IoError::io(&cfg.out_dir, e)))?;
    let mut run = Run {
        out: &cfg.out_dir,
        artifacts: Vec::new(),
    };
    let init_cams = io::read_cameras(&cfg.inputs.cameras).map_err(io_err(0))?;
    let dense: PointMapSet<f64> = io::read_pointmap(&cfg.inputs.dense).map_err(io_err(0))?;
    if init_cams.len() != dense.n_views {
        return Err(init(GeomError::DimensionMismatch(format!(
            "{} cameras for {} point maps",
            init_cams.len(),
            dense.n_views
        ))));
    }
    lap(&mut outcome, 0);

    // matching
    let m = &cfg.matching;
    let mut graphs = Vec::new();
    for p in &cfg.inputs.matches {
        let g = io::read_corr::<f64>(p).map_err(io_err(1))?;
        if g.n_views != dense.n_views || g.height != dense.height || g.width != dense.width {
            return Err(StageError::new(
                1,
                GeomError::DimensionMismatch(format!("{} does not match the point map grid", p.display())),
            ));
        }
        graphs.push(cycle_filter(&g, m.eps));
    }
    let merged = match graphs.as_slice() {
        [a, b] => ensemble(a, b).map_err(|e| StageError::new(1, e))?,
        _ => graphs.pop().expect("validated count"),
    };
    let (g_ba, g_dlt) = confidence_masks(&merged, m.eps_ba, m.eps_dlt).map_err(|e| StageError::new(1, e))?;
    let saliency = match &cfg.inputs.saliency {
        Some(p) => io::read_saliency(p).map_err(io_err(1))?,
        None => SaliencyMap::uniform(dense.n_views, dense.height, dense.width),
    };
    let tracks = build_tracks(&g_ba);
    let ba_tracks: Vec<_> = select_ba_anchors(&tracks, &saliency, m.n_ba)
        .into_iter()
        .filter(|t| dense.valid[dense.index(t.anchor_view, t.anchor.1, t.anchor.0)])
        .collect();
    outcome.n_tracks = tracks.len();
    outcome.n_ba_tracks = ba_tracks.len();
    io::write_corr(&run.path("matches_dlt.corr"), &g_dlt).map_err(io_err(1))?;
    io::write_tracks(&run.path("ba_tracks.txt"), &ba_tracks).map_err(io_err(1))?;
    lap(&mut outcome, 1);

    // sparse BA
    let cams = if cfg.stages.ba {
        let points: Vec<Vector3<f64>> = ba_tracks
            .iter()
            .map(|t| dense.points[dense.index(t.anchor_view, t.anchor.1, t.anchor.0)])
            .collect();
        let mut problem = BAProblem::new(init_cams.clone(), points, ba_tracks);
        problem.loss = RobustLoss::Cauchy {
            scale: cfg.ba.cauchy_scale,
        };
        problem.fix_intrinsics = cfg.ba.fix_intrinsics;
        let opts = SolveOptions {
            max_iters: cfg.ba.max_iters,
            tol: cfg.ba.tol,
            damping_init: cfg.ba.damping_init,
        };
        let (cams, pts, report) = ba::solve(&problem, &opts).map_err(|e| StageError::new(2, e))?;
        io::write_points(&run.path("ba_points.txt"), &pts, None).map_err(io_err(2))?;
        let text = format!(
            "iterations={}\ninitial_cost={}\nfinal_cost={}\nconverged={}\nmax_residual={}\n",
            report.iterations, report.initial_cost, report.final_cost, report.converged, report.max_residual
        );
        std::fs::write(run.path("ba_report.txt"), text).map_err(|e| StageError::new(2, IoError::io(cfg.out_dir.join("ba_report.txt"), e)))?;
        outcome.ba_report = Some(report);
        cams
    } else {
        init_cams
    };
    io::write_cameras(&run.path("cameras.txt"), &cams).map_err(io_err(2))?;
    lap(&mut outcome, 2);

    // triangulation
    let tcfg = cfg.triangulation().map_err(init)?;
    let cloud = triangulate_all(&g_dlt, &cams, &tcfg).map_err(|e| StageError::new(3, e))?;
    outcome.n_guides = cloud.len();
    io::write_cloud(&run.path("cloud.txt"), &cloud.points).map_err(io_err(3))?;
    io::write_assoc(&run.path("assoc.txt"), &cloud.assoc).map_err(io_err(3))?;
    lap(&mut outcome, 3);

    // dense alignment and refinement
    let refined = if cfg.stages.refine {
        let (src, dst): (Vec<_>, Vec<_>) = cloud
            .guides()
            .iter()
            .filter_map(|g| {
                let f = dense.index(g.pixel.view, g.pixel.v, g.pixel.u);
                dense.valid[f].then_some((dense.points[f], g.position))
            })
            .unzip();
        let sim = umeyama(&src, &dst).map_err(|e| StageError::new(4, e))?;
        let mut aligned = dense.clone();
        for (p, &v) in aligned.points.iter_mut().zip(&dense.valid) {
            if v {
                *p = sim.apply(p);
            }
        }
        io::write_pointmap(&run.path("dense_aligned.pmap"), &aligned).map_err(io_err(4))?;
        let pcfg = PatchConfig {
            r_ratio: cfg.refine.patch_ratio,
            budget: cfg.refine.budget,
            mode: PatchMode::Infer,
            seed: cfg.seed,
        };
        let refiner = cfg.refiner().map_err(init)?;
        let (fused, _) = refine_dense(&aligned, &cloud, &pcfg, refiner.as_ref()).map_err(|e| StageError::new(4, e))?;
        io::write_pointmap(&run.path("dense_refined.pmap"), &fused).map_err(io_err(4))?;
        fused
    } else {
        dense.clone()
    };
    lap(&mut outcome, 4);

    // evaluation
    if cfg.stages.eval && (cfg.inputs.gt_dense.is_some() || cfg.inputs.gt_cameras.is_some()) {
        let unit = cfg.unit().map_err(init)?;
        let mut report = MetricReport::default();
        if let Some(p) = &cfg.inputs.gt_dense {
            let gt: PointMapSet<f64> = io::read_pointmap(p).map_err(io_err(5))?;
            let (r, _) = point_auc(&refined, &gt, &cfg.eval.taus, unit, &cfg.ransac()).map_err(|e| StageError::new(5, e))?;
            let (input, _) = point_auc(&dense, &gt, &cfg.eval.taus, unit, &cfg.ransac()).map_err(|e| StageError::new(5, e))?;
            report = r;
            if let Some(d) = cfg.eval.chamfer_dist {
                let pick = |m: &PointMapSet<f64>| m.valid_indices().into_iter().map(|i| m.points[i]).collect::<Vec<_>>();
                let (acc, comp) = chamfer(&pick(&refined), &pick(&gt), d).map_err(|e| StageError::new(5, e))?;
                report.chamfer_acc = Some(acc);
                report.chamfer_comp = Some(comp);
            }
            std::fs::write(run.path("metrics_input.txt"), input.to_text())
                .map_err(|e| StageError::new(5, IoError::io(cfg.out_dir.join("metrics_input.txt"), e)))?;
            outcome.input_metrics = Some(input);
        }
        if let Some(p) = &cfg.inputs.gt_cameras {
            let gt = io::read_cameras(p).map_err(io_err(5))?;
            report.pose_auc = pose_auc(&cams, &gt, &cfg.eval.pose_deg).map_err(|e| StageError::new(5, e))?;
        }
        std::fs::write(run.path("metrics.txt"), report.to_text())
            .map_err(|e| StageError::new(5, IoError::io(cfg.out_dir.join("metrics.txt"), e)))?;
        std::fs::write(run.path("recall.csv"), report.recall_csv())
            .map_err(|e| StageError::new(5, IoError::io(cfg.out_dir.join("recall.csv"), e)))?;
        outcome.metrics = Some(report);
    }
    lap(&mut outcome, 5);

    outcome.cameras = cams;
    outcome.cloud = Some(cloud);
    outcome.refined = cfg.stages.refine.then_some(refined);
    outcome.artifacts = run.artifacts;
    write_manifest(cfg, &outcome).map_err(io_err(5))?;
    Ok(outcome)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config_hash: String,
    seed: u64,
    threads: usize,
    stage_seconds: Vec<(&'static str, f64)>,
    artifacts: Vec<String>,
    config: &'a PipelineConfig,
}

fn write_manifest(cfg: &PipelineConfig, outcome: &PipelineOutcome) -> Result<(), IoError> {
    let path = cfg.out_dir.join("manifest.json");
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        stage_seconds: outcome.stage_seconds.clone(),
        artifacts: outcome
            .artifacts
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| IoError::format(&path, e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| IoError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_constants() {
        let text = defaults_text();
        for line in [
            "eps = 4\n",
            "eps_ba = 0.6\n",
            "eps_dlt = 0.1\n",
            "n_ba = 2048\n",
            "max_reproj_px = 4\n",
            "min_angle_deg = 3\n",
            "lambda_id = 1\n",
            "alpha = 0.2\n",
            "budget = 400000\n",
            "patch_ratio = 0.2\n",
            "cauchy_scale_px = 1\n",
        ] {
            assert!(text.contains(line), "missing {line:?} in\n{text}");
        }
    }

    #[test]
    fn config_parses_sections_and_rejects_bad_thresholds() {
        let cfg = PipelineConfig::from_toml_str(
            "seed = 3\n[inputs]\nmatches = [\"a.corr\"]\n[matching]\neps_ba = 0.5\n[refine]\nrefiner = \"extern:cat\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.matching.eps_ba, 0.5);
        assert_eq!(cfg.matching.eps, 4.0);
        cfg.validate().unwrap();
        let bad = PipelineConfig {
            matching: MatchingConfig { eps_ba: 0.1, ..Default::default() },
            ..cfg.clone()
        };
        assert!(matches!(bad.validate(), Err(GeomError::ThresholdOrder { .. })));
        assert!(PipelineConfig::from_toml_str("[matching]\nnope = 1\n").is_err());
        let round = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(round, cfg);
        assert_eq!(round.hash(), cfg.hash());
    }
}
