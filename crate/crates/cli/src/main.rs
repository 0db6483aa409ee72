use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use ggsfm::align::{robust_umeyama, umeyama, RansacConfig, Sim3};
use ggsfm::ba::{self, BAProblem, RobustLoss, SolveOptions};
use ggsfm::eval::{chamfer, point_auc, pose_auc, Unit};
use ggsfm::io;
use ggsfm::matching::{build_tracks, confidence_masks, cycle_filter, ensemble, select_ba_anchors, SaliencyMap};
use ggsfm::pipeline::{defaults_text, run_pipeline, PipelineConfig};
use ggsfm::refine::{baseline_refiner, refine_dense, BaselineRefiner, PatchConfig, PatchMode, Refiner};
use ggsfm::synth::{generate, SynthConfig};
use ggsfm::triangulate::{triangulate_all, AngleAggregate, TriangulationConfig};
use ggsfm::PointMap;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Parser)]
#[command(name = "ggsfm", version, about = "Sparse-view SfM with geometry-guided dense refinement")]
struct Cli {
    /// Worker threads (defaults to GGSFM_THREADS, then all cores).
    #[arg(long, global = true, env = "GGSFM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Cycle-filter, ensemble and confidence-mask correspondence grids.
    FilterMatches(FilterArgs),
    /// Robust sparse bundle adjustment.
    Ba(BaArgs),
    /// Multi-view DLT triangulation of a correspondence graph.
    Triangulate(TriangulateArgs),
    /// Similarity alignment of two point lists.
    Align(AlignArgs),
    /// Patch-wise refinement of dense point maps.
    Refine(RefineArgs),
    /// Point, pose and chamfer metrics.
    Eval(EvalArgs),
    /// Run every stage from a config file.
    Pipeline(PipelineArgs),
    /// Print the default thresholds.
    PrintDefaults,
    /// Answer one refiner frame on stdin with the baseline refiner.
    #[command(hide = true)]
    ServeBaseline,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FilterArgs {
    /// One or two correspondence files.
    #[arg(long, num_args = 1..=2, required = true)]
    matches: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    eps: f64,
    #[arg(long, default_value_t = 0.6)]
    eps_ba: f64,
    #[arg(long, default_value_t = 0.1)]
    eps_dlt: f64,
    #[arg(long, default_value_t = 2048)]
    n_ba: usize,
    #[arg(long)]
    saliency: Option<PathBuf>,
}

#[derive(Args)]
struct BaArgs {
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    points_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    cauchy_scale: f64,
    /// Plain least squares instead of the Cauchy loss.
    #[arg(long)]
    squared: bool,
    #[arg(long)]
    fix_intrinsics: bool,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

#[derive(Args)]
struct TriangulateArgs {
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    matches: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    max_reproj: f64,
    #[arg(long, default_value_t = 3.0)]
    min_angle: f64,
    #[arg(long, default_value = "max")]
    aggregate: AngleAggregate,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    assoc_out: PathBuf,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    dst: PathBuf,
    #[arg(long)]
    robust: bool,
    #[arg(long, default_value_t = 0.03)]
    max_err: f64,
    #[arg(long, default_value_t = 0.8)]
    min_inlier_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    dense: PathBuf,
    #[arg(long)]
    guide: PathBuf,
    #[arg(long)]
    assoc: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    patch_ratio: f64,
    #[arg(long, default_value_t = 400_000)]
    budget: usize,
    /// `baseline` or `extern:<command>`.
    #[arg(long, default_value = "baseline")]
    refiner: String,
    /// Similarity-align the dense maps to the guidance first.
    #[arg(long)]
    align: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value = "cm")]
    unit: Unit,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    tau: Vec<usize>,
    /// Predicted cameras, for pose metrics.
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long)]
    pose_gt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pose_deg: Vec<f64>,
    #[arg(long)]
    chamfer_dist: Option<f64>,
    /// Drop predicted pixels below this confidence quantile.
    #[arg(long)]
    conf_quantile: Option<f64>,
    #[arg(long, default_value_t = 0.03)]
    max_err: f64,
    #[arg(long, default_value_t = 0.8)]
    min_inlier_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, required_unless_present = "print_defaults")]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set refine.budget=1000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    print_defaults: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let (code, result) = match cli.command {
        Command::Synth(a) => (1, synth(a)),
        Command::FilterMatches(a) => (2, filter_matches(a)),
        Command::Ba(a) => (3, bundle_adjust(a)),
        Command::Triangulate(a) => (4, triangulate(a)),
        Command::Align(a) => (1, align(a)),
        Command::Refine(a) => (5, refine(a)),
        Command::Eval(a) => (6, eval(a)),
        Command::Pipeline(a) => return pipeline(a),
        Command::PrintDefaults => {
            print!("{}", defaults_text());
            (0, Ok(()))
        }
        Command::ServeBaseline => (5, serve_baseline()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), BoxError> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_toml_str(&read_text(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let scene = generate(&cfg)?;
    let d = &a.out_dir;
    std::fs::create_dir_all(d)?;
    std::fs::write(d.join("scene.toml"), cfg.to_toml_string())?;
    io::write_cameras(&d.join("cameras_gt.txt"), &scene.gt_cameras)?;
    io::write_cameras(&d.join("cameras_init.txt"), &scene.init_cameras)?;
    io::write_pointmap(&d.join("gt.pmap"), &scene.gt_map)?;
    io::write_pointmap(&d.join("dense.pmap"), &scene.dense)?;
    io::write_corr(&d.join("matches.corr"), &scene.graph)?;
    io::write_cloud(&d.join("points_gt.txt"), &scene.gt_points)?;
    let pipeline = PipelineConfig {
        seed: cfg.seed,
        out_dir: "run".into(),
        inputs: ggsfm::pipeline::Inputs {
            cameras: "cameras_init.txt".into(),
            dense: "dense.pmap".into(),
            matches: vec!["matches.corr".into()],
            saliency: None,
            gt_dense: Some("gt.pmap".into()),
            gt_cameras: Some("cameras_gt.txt".into()),
        },
        ..Default::default()
    };
    std::fs::write(d.join("pipeline.toml"), pipeline.to_toml_string())?;
    println!(
        "views={} points={} outliers={} correspondences={}",
        cfg.n_views,
        scene.gt_points.len(),
        scene.n_outliers,
        scene.graph.count_valid()
    );
    Ok(())
}

fn filter_matches(a: FilterArgs) -> Result<(), BoxError> {
    let mut filtered = Vec::new();
    for p in &a.matches {
        filtered.push(cycle_filter(&io::read_corr::<f64>(p)?, a.eps));
    }
    let merged = match filtered.as_slice() {
        [x, y] => ensemble(x, y)?,
        _ => filtered.pop().expect("at least one matches file"),
    };
    let (g_ba, g_dlt) = confidence_masks(&merged, a.eps_ba, a.eps_dlt)?;
    let saliency = match &a.saliency {
        Some(p) => io::read_saliency(p)?,
        None => SaliencyMap::uniform(merged.n_views, merged.height, merged.width),
    };
    let tracks = select_ba_anchors(&build_tracks(&g_ba), &saliency, a.n_ba);
    std::fs::create_dir_all(&a.out_dir)?;
    io::write_corr(&a.out_dir.join("filtered.corr"), &merged)?;
    io::write_corr(&a.out_dir.join("matches_ba.corr"), &g_ba)?;
    io::write_corr(&a.out_dir.join("matches_dlt.corr"), &g_dlt)?;
    io::write_tracks(&a.out_dir.join("ba_tracks.txt"), &tracks)?;
    println!(
        "filtered={} ba={} dlt={} ba_tracks={}",
        merged.count_valid(),
        g_ba.count_valid(),
        g_dlt.count_valid(),
        tracks.len()
    );
    Ok(())
}

fn bundle_adjust(a: BaArgs) -> Result<(), BoxError> {
    let cams = io::read_cameras(&a.cameras)?;
    let tracks = io::read_tracks(&a.tracks)?;
    let points: std::collections::HashMap<usize, Vector3<f64>> = io::read_points(&a.points)?.into_iter().collect();
    let mut init = Vec::with_capacity(tracks.len());
    let mut kept = Vec::with_capacity(tracks.len());
    for (id, t) in tracks {
        let x = points.get(&id).ok_or_else(|| format!("track {id} has no initial point in {}", a.points.display()))?;
        init.push(*x);
        kept.push(t);
    }
    let mut problem = BAProblem::new(cams, init, kept);
    problem.loss = if a.squared {
        RobustLoss::Squared
    } else {
        RobustLoss::Cauchy { scale: a.cauchy_scale }
    };
    problem.fix_intrinsics = a.fix_intrinsics;
    let opts = SolveOptions {
        max_iters: a.max_iters,
        tol: a.tol,
        ..Default::default()
    };
    let (cams, pts, report) = ba::solve(&problem, &opts)?;
    io::write_cameras(&a.out, &cams)?;
    if let Some(p) = &a.points_out {
        io::write_points(p, &pts, None)?;
    }
    println!(
        "iterations={}\ninitial_cost={}\nfinal_cost={}\nconverged={}\nmax_residual={}",
        report.iterations, report.initial_cost, report.final_cost, report.converged, report.max_residual
    );
    Ok(())
}

fn triangulate(a: TriangulateArgs) -> Result<(), BoxError> {
    let cams = io::read_cameras(&a.cameras)?;
    let g = io::read_corr::<f64>(&a.matches)?;
    let cfg = TriangulationConfig {
        max_reproj: a.max_reproj,
        min_angle: a.min_angle,
        aggregate: a.aggregate,
    };
    let cloud = triangulate_all(&g, &cams, &cfg)?;
    io::write_cloud(&a.out, &cloud.points)?;
    io::write_assoc(&a.assoc_out, &cloud.assoc)?;
    println!("points={} coverage={}", cloud.len(), cloud.coverage());
    Ok(())
}

fn print_sim(m: &Sim3<f64>) {
    let mat = m.matrix();
    for r in 0..3 {
        println!("{} {} {} {}", mat[(r, 0)], mat[(r, 1)], mat[(r, 2)], mat[(r, 3)]);
    }
    println!("scale={}", m.scale);
}

fn align(a: AlignArgs) -> Result<(), BoxError> {
    let src: Vec<_> = io::read_points(&a.src)?.into_iter().map(|(_, x)| x).collect();
    let dst: Vec<_> = io::read_points(&a.dst)?.into_iter().map(|(_, x)| x).collect();
    if src.len() != dst.len() {
        return Err(format!("{} source points but {} target points", src.len(), dst.len()).into());
    }
    if a.robust {
        let cfg = RansacConfig {
            max_err: a.max_err,
            min_inlier_ratio: a.min_inlier_ratio,
            seed: a.seed,
            ..Default::default()
        };
        let (m, inliers) = robust_umeyama(&src, &dst, &cfg)?;
        print_sim(&m);
        println!("inliers={}", inliers.iter().filter(|&&b| b).count());
    } else {
        print_sim(&umeyama(&src, &dst)?);
    }
    Ok(())
}

fn refiner_from(name: &str) -> Result<Box<dyn Refiner<f64>>, BoxError> {
    let cfg = PipelineConfig {
        refine: ggsfm::pipeline::RefineConfig {
            refiner: name.to_string(),
            ..Default::default()
        },
        ..Default::default()
    };
    Ok(cfg.refiner()?)
}

fn refine(a: RefineArgs) -> Result<(), BoxError> {
    let mut dense: PointMap = io::read_pointmap(&a.dense)?;
    let cloud = io::read_guided_cloud(&a.guide, &a.assoc, dense.n_views, dense.height, dense.width)?;
    if a.align {
        let (src, dst): (Vec<_>, Vec<_>) = cloud
            .guides()
            .iter()
            .filter_map(|g| {
                let f = dense.index(g.pixel.view, g.pixel.v, g.pixel.u);
                dense.valid[f].then_some((dense.points[f], g.position))
            })
            .unzip();
        let sim = umeyama(&src, &dst)?;
        for (p, &v) in dense.points.iter_mut().zip(&dense.valid) {
            if v {
                *p = sim.apply(p);
            }
        }
    }
    let cfg = PatchConfig {
        r_ratio: a.patch_ratio,
        budget: a.budget,
        mode: PatchMode::Infer,
        seed: a.seed,
    };
    let refiner = refiner_from(&a.refiner)?;
    let (fused, stats) = refine_dense(&dense, &cloud, &cfg, refiner.as_ref())?;
    io::write_pointmap(&a.out, &fused)?;
    println!(
        "patches={} covered_dense={} scene_radius={}",
        stats.patches, stats.covered_dense, stats.scene_radius
    );
    Ok(())
}

fn quantile_filter(pm: &mut PointMap, q: f64) -> Result<(), BoxError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(format!("confidence quantile {q} outside [0, 1]").into());
    }
    let mut conf: Vec<f64> = pm.valid_indices().into_iter().map(|i| pm.confidence[i]).collect();
    if conf.is_empty() {
        return Ok(());
    }
    conf.sort_by(f64::total_cmp);
    let cut = conf[((conf.len() - 1) as f64 * q).floor() as usize];
    for i in 0..pm.len() {
        if pm.confidence[i] < cut {
            pm.valid[i] = false;
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), BoxError> {
    let mut report = ggsfm::eval::MetricReport {
        unit: a.unit.to_string(),
        ..Default::default()
    };
    match (&a.pred, &a.gt) {
        (Some(p), Some(g)) => {
            let mut pred: PointMap = io::read_pointmap(p)?;
            let gt: PointMap = io::read_pointmap(g)?;
            if let Some(q) = a.conf_quantile {
                quantile_filter(&mut pred, q)?;
            }
            let cfg = RansacConfig {
                max_err: a.max_err,
                min_inlier_ratio: a.min_inlier_ratio,
                seed: a.seed,
                ..Default::default()
            };
            let (r, sim) = point_auc(&pred, &gt, &a.tau, a.unit, &cfg)?;
            report = r;
            if let Some(d) = a.chamfer_dist {
                let aligned: Vec<_> = pred.valid_indices().into_iter().map(|i| sim.apply(&pred.points[i])).collect();
                let reference: Vec<_> = gt.valid_indices().into_iter().map(|i| gt.points[i]).collect();
                let (acc, comp) = chamfer(&aligned, &reference, d)?;
                report.chamfer_acc = Some(acc);
                report.chamfer_comp = Some(comp);
            }
        }
        (None, None) => {}
        _ => return Err("--pred and --gt must be given together".into()),
    }
    match (&a.cameras, &a.pose_gt) {
        (Some(c), Some(g)) => report.pose_auc = pose_auc(&io::read_cameras(c)?, &io::read_cameras(g)?, &a.pose_deg)?,
        (None, None) => {}
        _ => return Err("--cameras and --pose-gt must be given together".into()),
    }
    let text = report.to_text();
    match &a.out {
        Some(p) => std::fs::write(p, &text)?,
        None => print!("{text}"),
    }
    if let Some(p) = &a.csv {
        std::fs::write(p, report.recall_csv())?;
    }
    Ok(())
}

fn read_text(p: &Path) -> Result<String, BoxError> {
    std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()).into())
}

/// Applies `key.path=value` overrides to a TOML table. Values that do not
/// parse as TOML are taken as strings.
fn apply_override(table: &mut toml::Table, text: &str) -> Result<(), BoxError> {
    let (key, raw) = text.split_once('=').ok_or_else(|| format!("override `{text}` is not KEY=VALUE"))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("single key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| format!("empty key in `{text}`"))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !p.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

fn load_pipeline_config(a: &PipelineArgs, path: &Path) -> Result<PipelineConfig, BoxError> {
    let mut table: toml::Table = read_text(path)?.parse().map_err(|e| format!("{}: {e}", path.display()))?;
    for o in &a.overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: PipelineConfig = table.try_into().map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(d) = &a.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let inp = &mut cfg.inputs;
    for p in [&mut inp.cameras, &mut inp.dense]
        .into_iter()
        .chain(inp.matches.iter_mut())
        .chain(inp.saliency.iter_mut())
        .chain(inp.gt_dense.iter_mut())
        .chain(inp.gt_cameras.iter_mut())
    {
        resolve(base, p);
    }
    if a.out_dir.is_none() {
        resolve(base, &mut cfg.out_dir);
    }
    Ok(cfg)
}

fn pipeline(a: PipelineArgs) -> ExitCode {
    if a.print_defaults {
        print!("{}", defaults_text());
        return ExitCode::SUCCESS;
    }
    let path = a.config.clone().expect("clap requires --config");
    let cfg = match load_pipeline_config(&a, &path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: stage init failed: {e}");
            return ExitCode::from(1);
        }
    };
    match run_pipeline(&cfg) {
        Ok(out) => {
            if let Some(r) = &out.ba_report {
                println!("ba_iterations={} ba_final_cost={}", r.iterations, r.final_cost);
            }
            println!("tracks={} ba_tracks={} guides={}", out.n_tracks, out.n_ba_tracks, out.n_guides);
            if let Some(m) = &out.metrics {
                print!("{}", m.to_text());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

fn serve_baseline() -> Result<(), BoxError> {
    let mut input = Vec::new();
    std::io::stdin().read_to_end(&mut input)?;
    let (patch, _) = io::read_patch_frame::<f64, _>(&mut input.as_slice())?;
    let out = baseline_refiner(&patch, &BaselineRefiner::default());
    let mut buf = Vec::new();
    io::write_output_frame(&mut buf, &out)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&buf)?;
    stdout.flush()?;
    Ok(())
}
