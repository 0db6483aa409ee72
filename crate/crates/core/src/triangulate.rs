//! Multi-view DLT triangulation, geometric post-filters and the scatter of
//! surviving points into per-pixel guidance.

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;

use crate::error::GeomError;
use crate::matching::{build_tracks, CorrGraph, Track};
use crate::scalar::{lit, to_f64, Real};
use crate::scene::{project, CameraParams, PixelCoord};

/// How pairwise ray angles are reduced to one number per point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngleAggregate {
    /// Keep a point if any view pair sees it under a wide enough angle.
    #[default]
    Max,
    /// Require every view pair to see it under a wide enough angle.
    Min,
}

impl std::str::FromStr for AngleAggregate {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Self::Max),
            "min" => Ok(Self::Min),
            other => Err(format!("unknown angle aggregate '{other}' (expected min|max)")),
        }
    }
}

impl std::fmt::Display for AngleAggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Max => "max",
            Self::Min => "min",
        })
    }
}

/// Builds the row-normalized `2m x 4` DLT design matrix of a track.
pub fn design_matrix<T: Real>(track: &Track<T>, cameras: &[CameraParams<T>]) -> DMatrix<T> {
    let mut a = DMatrix::zeros(2 * track.obs.len(), 4);
    for (r, o) in track.obs.iter().enumerate() {
        let p = cameras[o.view].projection_matrix();
        let rows = [
            p.row(2) * o.pix.u - p.row(0),
            p.row(2) * o.pix.v - p.row(1),
        ];
        for (j, row) in rows.iter().enumerate() {
            let n = row.norm();
            let row = if n > T::zero() { row / n } else { *row };
            a.row_mut(2 * r + j).copy_from(&row);
        }
    }
    a
}

/// Triangulates one track. Returns the point and the ratio of the smallest
/// to the second smallest singular value of the design matrix.
pub fn dlt_point<T: Real>(track: &Track<T>, cameras: &[CameraParams<T>]) -> Result<(Vector3<T>, T), GeomError> {
    if track.obs.len() < 2 {
        return Err(GeomError::DegenerateGeometry("track has fewer than 2 observations".into()));
    }
    if let Some(o) = track.obs.iter().find(|o| o.view >= cameras.len()) {
        return Err(GeomError::InvalidArgument(format!("observation references missing camera {}", o.view)));
    }
    let a = design_matrix(track, cameras);
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| GeomError::DegenerateGeometry("SVD did not converge".into()))?;
    let sv = &svd.singular_values;
    let (s_max, s_second, s_min) = (sv[0], sv[2], sv[3]);
    if !(s_second > s_max * lit(1e-12)) {
        return Err(GeomError::DegenerateGeometry("design matrix has a null space of dimension > 1".into()));
    }
    let h = v_t.row(3);
    if h[3].abs() < lit(1e-12) {
        return Err(GeomError::DegenerateGeometry("point at infinity".into()));
    }
    Ok((Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]), s_min / s_second))
}

/// Largest reprojection error of `x` over the track's observations; infinite
/// if the point is behind any observing camera.
pub fn max_reprojection_error<T: Real>(track: &Track<T>, x: &Vector3<T>, cameras: &[CameraParams<T>]) -> f64 {
    track
        .obs
        .iter()
        .map(|o| match project(&cameras[o.view], x) {
            Ok(p) => to_f64(p.dist(&o.pix)),
            Err(_) => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

/// Angle in degrees between the rays from two camera centers to `x`.
pub fn ray_angle<T: Real>(c1: &Vector3<T>, c2: &Vector3<T>, x: &Vector3<T>) -> f64 {
    let a = c1 - x;
    let b = c2 - x;
    let cross = to_f64(a.cross(&b).norm());
    let dot = to_f64(a.dot(&b));
    cross.atan2(dot).to_degrees()
}

/// Pairwise triangulation angle over the track's views, reduced by `agg`.
pub fn triangulation_angle_with<T: Real>(
    track: &Track<T>,
    x: &Vector3<T>,
    cameras: &[CameraParams<T>],
    agg: AngleAggregate,
) -> f64 {
    let centers: Vec<_> = track.obs.iter().map(|o| cameras[o.view].center()).collect();
    let mut best: Option<f64> = None;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let a = ray_angle(&centers[i], &centers[j], x);
            best = Some(match (best, agg) {
                (None, _) => a,
                (Some(b), AngleAggregate::Max) => b.max(a),
                (Some(b), AngleAggregate::Min) => b.min(a),
            });
        }
    }
    best.unwrap_or(0.0)
}

/// Maximum pairwise triangulation angle in degrees.
pub fn triangulation_angle<T: Real>(track: &Track<T>, x: &Vector3<T>, cameras: &[CameraParams<T>]) -> f64 {
    triangulation_angle_with(track, x, cameras, AngleAggregate::Max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulationConfig {
    /// Maximum reprojection error in pixels.
    pub max_reproj: f64,
    /// Minimum aggregated triangulation angle in degrees.
    pub min_angle: f64,
    pub aggregate: AngleAggregate,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            max_reproj: 4.0,
            min_angle: 3.0,
            aggregate: AngleAggregate::Max,
        }
    }
}

/// An integer pixel of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelRef {
    pub view: usize,
    pub u: usize,
    pub v: usize,
}

/// Guidance attached to one dense pixel: the mean of all points scattered
/// onto it, and which points those were (ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGuide<T: Real> {
    pub pixel: PixelRef,
    pub position: Vector3<T>,
    pub points: Vec<usize>,
}

/// Per-point filter diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointDiagnostics {
    pub max_reproj: f64,
    pub angle: f64,
}

const NO_GUIDE: u32 = u32::MAX;

/// Triangulated guidance points and their links into the dense maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedCloud<T: Real> {
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub points: Vec<Vector3<T>>,
    /// Pixels each point projects to (one per observing view).
    pub assoc: Vec<Vec<PixelRef>>,
    /// Anchor pixel of the track that produced each point, when known.
    pub anchors: Vec<Option<PixelRef>>,
    /// Empty for clouds loaded from disk.
    pub diagnostics: Vec<PointDiagnostics>,
    guides: Vec<PixelGuide<T>>,
    lookup: Vec<u32>,
}

impl<T: Real> GuidedCloud<T> {
    /// Assembles a cloud and its per-pixel lookup. Colliding points are
    /// averaged in ascending point order.
    pub fn from_parts(
        n_views: usize,
        height: usize,
        width: usize,
        points: Vec<Vector3<T>>,
        assoc: Vec<Vec<PixelRef>>,
    ) -> Result<Self, GeomError> {
        if points.len() != assoc.len() {
            return Err(GeomError::DimensionMismatch("points and associations differ in length".into()));
        }
        let mut lookup = vec![NO_GUIDE; n_views * height * width];
        let mut guides: Vec<PixelGuide<T>> = Vec::new();
        let mut sums: Vec<Vector3<T>> = Vec::new();
        for (p, links) in assoc.iter().enumerate() {
            for l in links {
                if l.view >= n_views || l.u >= width || l.v >= height {
                    return Err(GeomError::InvalidArgument(format!("association {l:?} out of bounds")));
                }
                let flat = (l.view * height + l.v) * width + l.u;
                if lookup[flat] == NO_GUIDE {
                    lookup[flat] = guides.len() as u32;
                    guides.push(PixelGuide {
                        pixel: *l,
                        position: Vector3::zeros(),
                        points: Vec::new(),
                    });
                    sums.push(Vector3::zeros());
                }
                let g = lookup[flat] as usize;
                if guides[g].points.last() != Some(&p) {
                    guides[g].points.push(p);
                    sums[g] += points[p];
                }
            }
        }
        for (g, s) in guides.iter_mut().zip(sums) {
            g.position = s / lit::<T>(g.points.len() as f64);
        }
        let anchors = vec![None; points.len()];
        Ok(Self {
            n_views,
            height,
            width,
            points,
            assoc,
            anchors,
            diagnostics: Vec::new(),
            guides,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Guidance at a dense pixel, if any point landed there.
    pub fn guide_at(&self, view: usize, u: usize, v: usize) -> Option<&PixelGuide<T>> {
        self.guide_at_flat((view * self.height + v) * self.width + u)
    }

    /// Same as [`GuidedCloud::guide_at`] with a flat `(view, v, u)` index.
    pub fn guide_at_flat(&self, flat: usize) -> Option<&PixelGuide<T>> {
        match self.lookup.get(flat) {
            Some(&g) if g != NO_GUIDE => Some(&self.guides[g as usize]),
            _ => None,
        }
    }

    /// Index into [`GuidedCloud::guides`] of the guidance at a flat pixel.
    pub fn guide_index_at_flat(&self, flat: usize) -> Option<usize> {
        match self.lookup.get(flat) {
            Some(&g) if g != NO_GUIDE => Some(g as usize),
            _ => None,
        }
    }

    /// All guided pixels in first-seen order.
    pub fn guides(&self) -> &[PixelGuide<T>] {
        &self.guides
    }

    /// Fraction of the `n_views x height x width` grid carrying guidance.
    pub fn coverage(&self) -> f64 {
        self.guides.len() as f64 / self.lookup.len().max(1) as f64
    }
}

/// Triangulates every track of a confidence-masked graph, drops points with
/// large reprojection error or small triangulation angle and scatters the
/// survivors into pixel guidance.
pub fn triangulate_all<T: Real>(
    g: &CorrGraph<T>,
    cameras: &[CameraParams<T>],
    cfg: &TriangulationConfig,
) -> Result<GuidedCloud<T>, GeomError> {
    let tracks = build_tracks(g);
    triangulate_tracks(&tracks, cameras, g.n_views, g.height, g.width, cfg)
}

/// [`triangulate_all`] on an explicit track list.
pub fn triangulate_tracks<T: Real>(
    tracks: &[Track<T>],
    cameras: &[CameraParams<T>],
    n_views: usize,
    height: usize,
    width: usize,
    cfg: &TriangulationConfig,
) -> Result<GuidedCloud<T>, GeomError> {
    if cameras.len() != n_views {
        return Err(GeomError::DimensionMismatch(format!("{} cameras for {n_views} views", cameras.len())));
    }
    const CHUNK: usize = 256;
    let solved: Vec<Option<(Vector3<T>, PointDiagnostics, Vec<PixelRef>)>> = tracks
        .par_chunks(CHUNK)
        .flat_map_iter(|chunk| {
            chunk.iter().map(|t| {
                let (x, _) = dlt_point(t, cameras).ok()?;
                let diag = PointDiagnostics {
                    max_reproj: max_reprojection_error(t, &x, cameras),
                    angle: triangulation_angle_with(t, &x, cameras, cfg.aggregate),
                };
                if !(diag.max_reproj <= cfg.max_reproj) || diag.angle < cfg.min_angle {
                    return None;
                }
                let links: Vec<PixelRef> = t
                    .obs
                    .iter()
                    .filter_map(|o| {
                        let pix: PixelCoord<T> = project(&cameras[o.view], &x).ok()?;
                        let (u, v) = pix.round_in_bounds(width, height)?;
                        Some(PixelRef { view: o.view, u, v })
                    })
                    .collect();
                (links.len() >= 2).then_some((x, diag, links))
            })
        })
        .collect();

    let mut points = Vec::new();
    let mut assoc = Vec::new();
    let mut diagnostics = Vec::new();
    let mut anchors = Vec::new();
    for (t, s) in tracks.iter().zip(solved) {
        if let Some((x, d, links)) = s {
            points.push(x);
            assoc.push(links);
            diagnostics.push(d);
            anchors.push(Some(PixelRef {
                view: t.anchor_view,
                u: t.anchor.0,
                v: t.anchor.1,
            }));
        }
    }
    let mut cloud = GuidedCloud::from_parts(n_views, height, width, points, assoc)?;
    cloud.diagnostics = diagnostics;
    cloud.anchors = anchors;
    Ok(cloud)
}
