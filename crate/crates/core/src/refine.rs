//! Patch-based refinement of dense point maps guided by triangulated points.
//!
//! The dense cloud is cut into axis-aligned cubes around guidance points,
//! each cube is normalized to `[0,1]^3`, every point receives a fixed-width
//! embedding, a [`Refiner`] predicts a residual and a raw confidence per
//! point, and overlapping predictions are averaged back in the world frame.

use std::io::{Read, Write};
use std::num::NonZero;
use std::process::{Command, Stdio};

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::GeomError;
use crate::rng::SceneRng;
use crate::scalar::{lit, to_f64, Real};
use crate::scene::PointMapSet;
use crate::triangulate::GuidedCloud;

pub const PE_FREQUENCIES: usize = 4;
pub const PE_DIM: usize = 3 * 2 * PE_FREQUENCIES;
pub const TYPE_DIM: usize = 16;
pub const EMBED_DIM: usize = 2 * PE_DIM + TYPE_DIM + 3;

/// Raw confidences are clamped from below before exponentiation.
pub const MIN_RAW_CONFIDENCE: f64 = -30.0;

/// Three times the RMS distance of the cloud from its centroid.
pub fn scene_radius<T: Real>(points: &[Vector3<T>]) -> Result<T, GeomError> {
    if points.len() < 2 {
        return Err(GeomError::EmptyCloud);
    }
    let n: T = lit(points.len() as f64);
    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let ms = points.iter().fold(T::zero(), |a, p| a + (p - centroid).norm_squared()) / n;
    Ok(lit::<T>(3.0) * ms.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMode {
    /// One patch around a seeded random guide point.
    Train,
    /// Sliding cubes until every guide point is covered.
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchConfig {
    /// Half-width as a fraction of the scene radius.
    pub r_ratio: f64,
    /// Maximum number of dense points per patch.
    pub budget: usize,
    pub mode: PatchMode,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            r_ratio: 0.2,
            budget: 400_000,
            mode: PatchMode::Infer,
            seed: 0,
        }
    }
}

/// Guidance of one dense point inside a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link<T: Real> {
    /// Index into [`GuidedCloud::guides`].
    pub guide: usize,
    /// Position in the patch's guide list of the first contributing point.
    pub local: usize,
    /// Guidance position in normalized coordinates.
    pub target: Vector3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T: Real> {
    pub center: Vector3<T>,
    pub half_width: T,
    /// Flat indices into the dense map, ascending.
    pub dense_idx: Vec<usize>,
    /// Indices into the guide cloud, ascending.
    pub guide_idx: Vec<usize>,
    pub guide_norm: Vec<Vector3<T>>,
    pub dense_norm: Vec<Vector3<T>>,
    /// One entry per dense point.
    pub links: Vec<Option<Link<T>>>,
}

impl<T: Real> Patch<T> {
    fn origin(&self) -> Vector3<T> {
        self.center.add_scalar(-self.half_width)
    }

    fn width(&self) -> T {
        self.half_width + self.half_width
    }

    pub fn normalize(&self, x: &Vector3<T>) -> Vector3<T> {
        (x - self.origin()) / self.width()
    }

    pub fn denormalize(&self, n: &Vector3<T>) -> Vector3<T> {
        self.origin() + n * self.width()
    }

    /// Number of points fed to a refiner: guides first, then dense.
    pub fn len(&self) -> usize {
        self.guide_idx.len() + self.dense_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the structural invariants.
    pub fn validate(&self, budget: usize) -> Result<(), GeomError> {
        let in_unit = |p: &Vector3<T>| p.iter().all(|&c| c >= T::zero() && c <= T::one());
        if self.dense_idx.len() > budget {
            return Err(GeomError::InvalidArgument("patch exceeds its budget".into()));
        }
        if self.links.len() != self.dense_idx.len() || self.dense_norm.len() != self.dense_idx.len() {
            return Err(GeomError::DimensionMismatch("patch dense arrays differ in length".into()));
        }
        if !self.guide_norm.iter().chain(&self.dense_norm).all(in_unit) {
            return Err(GeomError::InvalidArgument("normalized coordinate outside the unit cube".into()));
        }
        for l in self.links.iter().flatten() {
            if l.local >= self.guide_idx.len() || !in_unit(&l.target) {
                return Err(GeomError::InvalidArgument("link outside the patch".into()));
            }
        }
        Ok(())
    }
}

fn in_cube<T: Real>(x: &Vector3<T>, center: &Vector3<T>, hw: T) -> bool {
    (x - center).iter().all(|c| c.abs() <= hw)
}

fn clamp_unit<T: Real>(p: Vector3<T>) -> Vector3<T> {
    p.map(|c| c.max(T::zero()).min(T::one()))
}

struct Membership {
    dense: Vec<usize>,
    guides: Vec<usize>,
}

/// Dense points of one cube. A guided dense point joins only when every
/// point contributing to its guidance lies in the cube too.
fn cube_members<T: Real>(
    dense: &PointMapSet<T>,
    valid: &[usize],
    cloud: &GuidedCloud<T>,
    center: &Vector3<T>,
    hw: T,
) -> Membership {
    let guide_in: Vec<bool> = cloud.points.par_iter().map(|p| in_cube(p, center, hw)).collect();
    let guides = (0..cloud.len()).filter(|&i| guide_in[i]).collect();
    let dense_idx = valid
        .par_iter()
        .filter(|&&f| {
            in_cube(&dense.points[f], center, hw)
                && cloud.guide_at_flat(f).is_none_or(|g| g.points.iter().all(|&p| guide_in[p]))
        })
        .copied()
        .collect();
    Membership { dense: dense_idx, guides }
}

fn build_patch<T: Real>(dense: &PointMapSet<T>, cloud: &GuidedCloud<T>, center: Vector3<T>, hw: T, m: Membership) -> Patch<T> {
    let mut patch = Patch {
        center,
        half_width: hw,
        dense_idx: Vec::new(),
        guide_idx: Vec::new(),
        guide_norm: Vec::new(),
        dense_norm: Vec::new(),
        links: Vec::new(),
    };
    patch.guide_norm = m.guides.iter().map(|&g| clamp_unit(patch.normalize(&cloud.points[g]))).collect();
    patch.dense_norm = m.dense.iter().map(|&f| clamp_unit(patch.normalize(&dense.points[f]))).collect();
    patch.links = m
        .dense
        .iter()
        .map(|&f| {
            let gi = cloud.guide_index_at_flat(f)?;
            let g = &cloud.guides()[gi];
            let local = m.guides.binary_search(&g.points[0]).ok()?;
            Some(Link {
                guide: gi,
                local,
                target: clamp_unit(patch.normalize(&g.position)),
            })
        })
        .collect();
    patch.dense_idx = m.dense;
    patch.guide_idx = m.guides;
    patch
}

/// Cuts the dense map into patches around guide points.
///
/// In infer mode the lowest-index uncovered guide point seeds each cube; the
/// cube shrinks by 0.9 until it fits the budget. A guide point counts as
/// covered once it lies in a cube whose dense set holds every pixel it is
/// linked to; the seed itself is always covered.
pub fn extract_patches<T: Real>(
    dense: &PointMapSet<T>,
    cloud: &GuidedCloud<T>,
    cfg: &PatchConfig,
) -> Result<Vec<Patch<T>>, GeomError> {
    if !(cfg.r_ratio > 0.0 && cfg.r_ratio <= 1.0) {
        return Err(GeomError::InvalidArgument(format!("patch ratio {} outside (0, 1]", cfg.r_ratio)));
    }
    if cfg.budget == 0 {
        return Err(GeomError::InvalidArgument("point budget must be positive".into()));
    }
    if cloud.n_views != dense.n_views || cloud.height != dense.height || cloud.width != dense.width {
        return Err(GeomError::DimensionMismatch("guide cloud and dense map grids differ".into()));
    }
    let radius = scene_radius(&cloud.points)?;
    let valid = dense.valid_indices();
    let min_hw = radius * lit(1e-6);

    let cut = |anchor: usize| -> Result<Patch<T>, GeomError> {
        let center = cloud.points[anchor];
        let mut hw = radius * lit(cfg.r_ratio);
        loop {
            let m = cube_members(dense, &valid, cloud, &center, hw);
            if m.dense.len() <= cfg.budget {
                return Ok(build_patch(dense, cloud, center, hw, m));
            }
            hw *= lit(0.9);
            if hw < min_hw {
                return Err(GeomError::BudgetUnsatisfiable(format!(
                    "{} dense points remain within 1e-6 R of guide point {anchor}",
                    m.dense.len()
                )));
            }
        }
    };

    match cfg.mode {
        PatchMode::Train => {
            let anchor = SceneRng::new(cfg.seed).below(cloud.len());
            Ok(vec![cut(anchor)?])
        }
        PatchMode::Infer => {
            let mut covered = vec![false; cloud.len()];
            let mut in_patch = vec![false; dense.len()];
            let mut patches = Vec::new();
            let mut next = 0;
            while let Some(anchor) = (next..cloud.len()).find(|&i| !covered[i]) {
                next = anchor;
                let patch = cut(anchor)?;
                for &f in &patch.dense_idx {
                    in_patch[f] = true;
                }
                for &g in &patch.guide_idx {
                    let linked_in = cloud.assoc[g].iter().all(|px| {
                        let f = dense.index(px.view, px.v, px.u);
                        !dense.valid[f] || in_patch[f]
                    });
                    if linked_in {
                        covered[g] = true;
                    }
                }
                covered[anchor] = true;
                for &f in &patch.dense_idx {
                    in_patch[f] = false;
                }
                patches.push(patch);
            }
            Ok(patches)
        }
    }
}

pub type Embedding<T> = [T; EMBED_DIM];

/// `[sin(2^k pi x_c), cos(2^k pi x_c)]` for k = 0..4, grouped per coordinate.
pub fn positional_encoding<T: Real>(x: &Vector3<T>) -> [T; PE_DIM] {
    let mut out = [T::zero(); PE_DIM];
    for c in 0..3 {
        for k in 0..PE_FREQUENCIES {
            let a = lit::<T>((1u32 << k) as f64) * T::pi() * x[c];
            out[c * 2 * PE_FREQUENCIES + 2 * k] = a.sin();
            out[c * 2 * PE_FREQUENCIES + 2 * k + 1] = a.cos();
        }
    }
    out
}

fn embedding<T: Real>(x: &Vector3<T>, guide: bool, link: Option<&Vector3<T>>) -> Embedding<T> {
    let mut e = [T::zero(); EMBED_DIM];
    e[..PE_DIM].copy_from_slice(&positional_encoding(x));
    let token = if guide { PE_DIM..PE_DIM + 8 } else { PE_DIM + 8..PE_DIM + TYPE_DIM };
    for v in &mut e[token] {
        *v = T::one();
    }
    if let Some(target) = link {
        let off = PE_DIM + TYPE_DIM;
        e[off..off + PE_DIM].copy_from_slice(&positional_encoding(target));
        let d = target - x;
        e[off + PE_DIM..].copy_from_slice(d.as_slice());
    }
    e
}

/// Embeddings of a patch's points, guides first, then dense.
pub fn embed<T: Real>(patch: &Patch<T>) -> Vec<Embedding<T>> {
    let guides = patch.guide_norm.iter().map(|x| embedding(x, true, None));
    let dense = patch
        .dense_norm
        .iter()
        .zip(&patch.links)
        .map(|(x, l)| embedding(x, false, l.as_ref().map(|l| &l.target)));
    guides.chain(dense).collect()
}

/// `exp(c_raw) + 1` with `c_raw` clamped at -30.
pub fn confidence<T: Real>(c_raw: T) -> T {
    c_raw.max(lit(MIN_RAW_CONFIDENCE)).exp() + T::one()
}

/// Per-point residuals (normalized units) and raw confidences, guides first.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerOutput<T: Real> {
    pub delta: Vec<Vector3<T>>,
    pub c_raw: Vec<T>,
}

impl<T: Real> RefinerOutput<T> {
    /// Leaves every point where it is.
    pub fn identity(n: usize) -> Self {
        Self {
            delta: vec![Vector3::zeros(); n],
            c_raw: vec![T::zero(); n],
        }
    }

    pub fn validate(&self, patch: &Patch<T>) -> Result<(), GeomError> {
        if self.delta.len() != patch.len() || self.c_raw.len() != patch.len() {
            return Err(GeomError::DimensionMismatch(format!(
                "refiner returned {} entries for {} points",
                self.delta.len(),
                patch.len()
            )));
        }
        let finite = self.delta.iter().all(|d| d.iter().all(|c| c.is_finite())) && self.c_raw.iter().all(|c| c.is_finite());
        if !finite {
            return Err(GeomError::InvalidArgument("refiner returned non-finite values".into()));
        }
        Ok(())
    }
}

/// A pure per-patch predictor.
pub trait Refiner<T: Real>: Sync {
    fn refine(&self, patch: &Patch<T>, embeddings: &[Embedding<T>]) -> Result<RefinerOutput<T>, GeomError>;
}

/// Non-learned stand-in: guided points snap to their guidance, unguided
/// points interpolate neighbouring guided displacements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineRefiner {
    pub k: usize,
    pub power: f64,
    /// Confidence decay length as a fraction of the half-width.
    pub decay: f64,
}

impl Default for BaselineRefiner {
    fn default() -> Self {
        Self {
            k: 8,
            power: 2.0,
            decay: 0.05,
        }
    }
}

fn to_array<T: Real>(p: &Vector3<T>) -> [f64; 3] {
    [to_f64(p.x), to_f64(p.y), to_f64(p.z)]
}

impl<T: Real> Refiner<T> for BaselineRefiner {
    fn refine(&self, patch: &Patch<T>, _embeddings: &[Embedding<T>]) -> Result<RefinerOutput<T>, GeomError> {
        Ok(baseline_refiner(patch, self))
    }
}

/// See [`BaselineRefiner`].
pub fn baseline_refiner<T: Real>(patch: &Patch<T>, params: &BaselineRefiner) -> RefinerOutput<T> {
    let n_g = patch.guide_idx.len();
    let mut out = RefinerOutput::identity(patch.len());

    let guide_pts: Vec<[f64; 3]> = patch.guide_norm.iter().map(to_array).collect();
    let guide_tree: Option<ImmutableKdTree<f64, u64, 3, 32>> = (!guide_pts.is_empty()).then(|| ImmutableKdTree::new_from_slice(&guide_pts));
    // normalized distance d maps to -d * 2hw / (decay * hw)
    let scale = 2.0 / params.decay;
    let raw_conf = |p: &Vector3<T>| -> T {
        match &guide_tree {
            Some(t) => lit(-t.nearest_one::<SquaredEuclidean>(&to_array(p)).distance.sqrt() * scale),
            None => lit(MIN_RAW_CONFIDENCE),
        }
    };

    let guided: Vec<usize> = (0..patch.dense_idx.len()).filter(|&i| patch.links[i].is_some()).collect();
    let guided_pts: Vec<[f64; 3]> = guided.iter().map(|&i| to_array(&patch.dense_norm[i])).collect();
    let snap = |i: usize| patch.links[i].map(|l| l.target - patch.dense_norm[i]);
    let tree: Option<ImmutableKdTree<f64, u64, 3, 32>> = (!guided_pts.is_empty()).then(|| ImmutableKdTree::new_from_slice(&guided_pts));
    let k = NonZero::new(params.k.max(1)).unwrap();

    let dense: Vec<(Vector3<T>, T)> = (0..patch.dense_idx.len())
        .into_par_iter()
        .map(|i| {
            let x = &patch.dense_norm[i];
            let c = raw_conf(x);
            if let Some(d) = snap(i) {
                return (d, c);
            }
            let Some(tree) = &tree else { return (Vector3::zeros(), c) };
            let nn = tree.nearest_n::<SquaredEuclidean>(&to_array(x), k);
            if let Some(hit) = nn.iter().find(|n| n.distance == 0.0) {
                return (snap(guided[hit.item as usize]).unwrap(), c);
            }
            let mut acc = Vector3::<T>::zeros();
            let mut wsum = T::zero();
            for n in &nn {
                let w: T = lit(n.distance.powf(-params.power / 2.0));
                acc += snap(guided[n.item as usize]).unwrap() * w;
                wsum += w;
            }
            (acc / wsum, c)
        })
        .collect();
    for (i, (d, c)) in dense.into_iter().enumerate() {
        out.delta[n_g + i] = d;
        out.c_raw[n_g + i] = c;
    }
    out
}

/// Runs an external program per patch, exchanging binary frames on its
/// standard streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternRefiner {
    pub command: String,
}

impl<T: Real> Refiner<T> for ExternRefiner {
    fn refine(&self, patch: &Patch<T>, embeddings: &[Embedding<T>]) -> Result<RefinerOutput<T>, GeomError> {
        let fail = |msg: String| GeomError::InvalidArgument(format!("external refiner `{}`: {msg}", self.command));
        let mut frame = Vec::new();
        crate::io::write_patch_frame(&mut frame, patch, embeddings).map_err(|e| fail(e.to_string()))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(&frame));
        let mut reply = Vec::new();
        child
            .stdout
            .take()
            .expect("piped stdout")
            .read_to_end(&mut reply)
            .map_err(|e| fail(e.to_string()))?;
        let status = child.wait().map_err(|e| fail(e.to_string()))?;
        writer
            .join()
            .map_err(|_| fail("writer thread panicked".into()))?
            .map_err(|e| fail(e.to_string()))?;
        if !status.success() {
            return Err(fail(format!("exited with {status}")));
        }
        let out = crate::io::read_output_frame(&mut reply.as_slice()).map_err(|e| fail(e.to_string()))?;
        out.validate(patch)?;
        Ok(out)
    }
}

/// Averages per-patch dense predictions in the world frame. Uncovered points
/// keep their input position and confidence.
pub fn fuse<T: Real>(
    patches: &[Patch<T>],
    outputs: &[RefinerOutput<T>],
    dense: &PointMapSet<T>,
) -> Result<PointMapSet<T>, GeomError> {
    if patches.len() != outputs.len() {
        return Err(GeomError::DimensionMismatch(format!(
            "{} outputs for {} patches",
            outputs.len(),
            patches.len()
        )));
    }
    let n = dense.len();
    let mut first: Vec<Option<Vector3<T>>> = vec![None; n];
    let mut offset = vec![Vector3::<T>::zeros(); n];
    let mut conf = vec![T::zero(); n];
    let mut count = vec![0usize; n];
    for (patch, out) in patches.iter().zip(outputs) {
        out.validate(patch)?;
        let n_g = patch.guide_idx.len();
        let w = patch.width();
        for (i, &f) in patch.dense_idx.iter().enumerate() {
            let pred = dense.points[f] + out.delta[n_g + i] * w;
            match first[f] {
                None => first[f] = Some(pred),
                Some(p0) => offset[f] += pred - p0,
            }
            conf[f] += confidence(out.c_raw[n_g + i]);
            count[f] += 1;
        }
    }
    let mut fused = dense.clone();
    for f in 0..n {
        if let Some(p0) = first[f] {
            let c: T = lit(count[f] as f64);
            fused.points[f] = if count[f] == 1 { p0 } else { p0 + offset[f] / c };
            fused.confidence[f] = conf[f] / c;
        }
    }
    Ok(fused)
}

/// `sum c |x - gt| - alpha log c`.
pub fn loss_conf<T: Real>(pred: &[Vector3<T>], conf: &[T], gt: &[Vector3<T>], alpha: T) -> T {
    pred.iter()
        .zip(conf)
        .zip(gt)
        .fold(T::zero(), |acc, ((x, &c), g)| acc + c * (x - g).norm() - alpha * c.ln())
}

/// Gradient of [`loss_conf`] with respect to each predicted position; zero
/// at the kink.
pub fn loss_conf_grad<T: Real>(pred: &[Vector3<T>], conf: &[T], gt: &[Vector3<T>]) -> Vec<Vector3<T>> {
    pred.iter()
        .zip(conf)
        .zip(gt)
        .map(|((x, &c), g)| {
            let e = x - g;
            let n = e.norm();
            if n > T::zero() {
                e * (c / n)
            } else {
                Vector3::zeros()
            }
        })
        .collect()
}

/// `sum |x - x_link|` over predictions that carry a link.
pub fn loss_id<T: Real>(pred: &[Vector3<T>], links: &[Option<Vector3<T>>]) -> T {
    pred.iter()
        .zip(links)
        .filter_map(|(x, l)| l.map(|l| (x - l).norm()))
        .fold(T::zero(), |a, b| a + b)
}

/// `L_conf + lambda_id L_id`.
pub fn total_loss<T: Real>(l_conf: T, l_id: T, lambda_id: T) -> T {
    l_conf + lambda_id * l_id
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RefineStats {
    pub patches: usize,
    pub covered_dense: usize,
    pub scene_radius: f64,
}

/// Extracts patches, refines them in parallel and fuses the result.
pub fn refine_dense<T: Real, R: Refiner<T> + ?Sized>(
    dense: &PointMapSet<T>,
    cloud: &GuidedCloud<T>,
    cfg: &PatchConfig,
    refiner: &R,
) -> Result<(PointMapSet<T>, RefineStats), GeomError> {
    let patches = extract_patches(dense, cloud, cfg)?;
    let outputs = patches
        .par_iter()
        .map(|p| refiner.refine(p, &embed(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let fused = fuse(&patches, &outputs, dense)?;
    let mut seen = vec![false; dense.len()];
    for p in &patches {
        for &f in &p.dense_idx {
            seen[f] = true;
        }
    }
    let stats = RefineStats {
        patches: patches.len(),
        covered_dense: seen.iter().filter(|&&s| s).count(),
        scene_radius: to_f64(scene_radius(&cloud.points)?),
    };
    Ok((fused, stats))
}
