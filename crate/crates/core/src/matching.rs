//! Dense pairwise correspondences and the filters that turn them into tracks.

use rayon::prelude::*;

use crate::error::GeomError;
use crate::scalar::{lit, to_f64, Real};
use crate::scene::PixelCoord;

/// Correspondences from every pixel of view `i` into view `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrid<T: Real> {
    pub target: Vec<PixelCoord<T>>,
    pub conf: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Real> PairGrid<T> {
    pub fn empty(len: usize) -> Self {
        Self {
            target: vec![PixelCoord::new(T::zero(), T::zero()); len],
            conf: vec![T::zero(); len],
            valid: vec![false; len],
        }
    }
}

/// Directional correspondence grids for all ordered view pairs `(i, k)`,
/// `i != k`. Pairs are stored in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrGraph<T: Real> {
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pairs: Vec<PairGrid<T>>,
}

/// How the backward grid is read at a (sub-pixel) forward target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CycleLookup {
    /// Nearest integer pixel.
    #[default]
    Nearest,
    /// Bilinear interpolation of the four surrounding targets.
    Bilinear,
}

impl<T: Real> CorrGraph<T> {
    /// Graph with every correspondence invalid.
    pub fn new(n_views: usize, height: usize, width: usize) -> Self {
        let n_pairs = n_views * n_views.saturating_sub(1);
        Self {
            n_views,
            height,
            width,
            pairs: (0..n_pairs).map(|_| PairGrid::empty(height * width)).collect(),
        }
    }

    /// Builds a graph from pairs listed in lexicographic `(i, k)` order.
    pub fn from_pairs(
        n_views: usize,
        height: usize,
        width: usize,
        pairs: Vec<PairGrid<T>>,
    ) -> Result<Self, GeomError> {
        let n = height * width;
        if pairs.len() != n_views * n_views.saturating_sub(1)
            || pairs
                .iter()
                .any(|p| p.target.len() != n || p.conf.len() != n || p.valid.len() != n)
        {
            return Err(GeomError::DimensionMismatch("pair grids do not match graph shape".into()));
        }
        Ok(Self {
            n_views,
            height,
            width,
            pairs,
        })
    }

    pub fn pixels_per_view(&self) -> usize {
        self.height * self.width
    }

    /// Position of the ordered pair `(i, k)` in storage.
    pub fn pair_index(&self, i: usize, k: usize) -> usize {
        assert!(i != k && i < self.n_views && k < self.n_views, "invalid pair ({i}, {k})");
        i * (self.n_views - 1) + if k < i { k } else { k - 1 }
    }

    /// The ordered pair stored at `idx`.
    pub fn pair_views(&self, idx: usize) -> (usize, usize) {
        let i = idx / (self.n_views - 1);
        let r = idx % (self.n_views - 1);
        (i, if r < i { r } else { r + 1 })
    }

    pub fn pair(&self, i: usize, k: usize) -> &PairGrid<T> {
        &self.pairs[self.pair_index(i, k)]
    }

    pub fn pair_mut(&mut self, i: usize, k: usize) -> &mut PairGrid<T> {
        let idx = self.pair_index(i, k);
        &mut self.pairs[idx]
    }

    pub fn pairs(&self) -> &[PairGrid<T>] {
        &self.pairs
    }

    #[inline]
    pub fn pixel_index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_views == other.n_views && self.height == other.height && self.width == other.width
    }

    /// Number of valid correspondences over all pairs.
    pub fn count_valid(&self) -> usize {
        self.pairs.iter().map(|p| p.valid.iter().filter(|&&b| b).count()).sum()
    }

    /// Checks confidence range and that valid targets fall inside the image.
    pub fn validate(&self) -> Result<(), GeomError> {
        for (idx, p) in self.pairs.iter().enumerate() {
            for px in 0..self.pixels_per_view() {
                let c = p.conf[px];
                if !(c >= T::zero() && c <= T::one()) {
                    return Err(GeomError::InvalidArgument(format!(
                        "confidence {c} outside [0,1] in pair {:?}",
                        self.pair_views(idx)
                    )));
                }
                if p.valid[px] && p.target[px].round_in_bounds(self.width, self.height).is_none() {
                    return Err(GeomError::InvalidArgument(format!(
                        "valid target out of bounds in pair {:?}",
                        self.pair_views(idx)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cycle error of pixel `px` of view `i` matched into view `k`:
    /// `|T[k,i,T[i,k,u]] - u|`. `None` when the forward target falls
    /// outside view `k`. Validity flags are not consulted.
    pub fn cycle_error(&self, i: usize, k: usize, px: usize, lookup: CycleLookup) -> Option<T> {
        let fwd = self.pair(i, k).target[px];
        let back = &self.pair(k, i).target;
        let start = PixelCoord::new(
            lit::<T>((px % self.width) as f64),
            lit::<T>((px / self.width) as f64),
        );
        let landed = match lookup {
            CycleLookup::Nearest => {
                let (u, v) = fwd.round_in_bounds(self.width, self.height)?;
                back[self.pixel_index(u, v)]
            }
            CycleLookup::Bilinear => bilinear(back, self.width, self.height, fwd)?,
        };
        Some(landed.dist(&start))
    }

    /// Cycle errors of every correspondence, pair by pair. Invalid or
    /// out-of-bounds correspondences get `None` (infinite error).
    pub fn cycle_errors(&self, lookup: CycleLookup) -> Vec<Vec<Option<T>>> {
        (0..self.pairs.len())
            .into_par_iter()
            .map(|idx| {
                let (i, k) = self.pair_views(idx);
                let p = &self.pairs[idx];
                (0..self.pixels_per_view())
                    .map(|px| {
                        if p.valid[px] {
                            self.cycle_error(i, k, px, lookup)
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

fn bilinear<T: Real>(grid: &[PixelCoord<T>], width: usize, height: usize, at: PixelCoord<T>) -> Option<PixelCoord<T>> {
    let x = to_f64(at.u);
    let y = to_f64(at.v);
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let ax: T = lit(x - x0 as f64);
    let ay: T = lit(y - y0 as f64);
    let one = T::one();
    let g = |u: usize, v: usize| grid[v * width + u];
    let (a, b, c, d) = (g(x0, y0), g(x1, y0), g(x0, y1), g(x1, y1));
    let w00 = (one - ax) * (one - ay);
    let w10 = ax * (one - ay);
    let w01 = (one - ax) * ay;
    let w11 = ax * ay;
    Some(PixelCoord::new(
        a.u * w00 + b.u * w10 + c.u * w01 + d.u * w11,
        a.v * w00 + b.v * w10 + c.v * w01 + d.v * w11,
    ))
}

/// Keeps a correspondence only if its forward target lies inside the target
/// view and mapping back lands within `eps` pixels of the start.
pub fn cycle_filter<T: Real>(g: &CorrGraph<T>, eps: T) -> CorrGraph<T> {
    cycle_filter_with(g, eps, CycleLookup::Nearest)
}

pub fn cycle_filter_with<T: Real>(g: &CorrGraph<T>, eps: T, lookup: CycleLookup) -> CorrGraph<T> {
    let pairs = (0..g.pairs.len())
        .into_par_iter()
        .map(|idx| {
            let (i, k) = g.pair_views(idx);
            let src = &g.pairs[idx];
            let valid = (0..g.pixels_per_view())
                .map(|px| src.valid[px] && g.cycle_error(i, k, px, lookup).is_some_and(|e| e < eps))
                .collect();
            PairGrid {
                target: src.target.clone(),
                conf: src.conf.clone(),
                valid,
            }
        })
        .collect();
    CorrGraph { pairs, ..*g }
}

/// Per-pixel selection between two matchers by smaller cycle error. Exact
/// ties (including both infinite) keep `g1`.
pub fn ensemble<T: Real>(g1: &CorrGraph<T>, g2: &CorrGraph<T>) -> Result<CorrGraph<T>, GeomError> {
    ensemble_with(g1, g2, CycleLookup::Nearest).map(|(g, _)| g)
}

/// Like [`ensemble`], also returning the cycle error of each selected entry
/// (as measured in its source graph).
pub fn ensemble_with<T: Real>(
    g1: &CorrGraph<T>,
    g2: &CorrGraph<T>,
    lookup: CycleLookup,
) -> Result<(CorrGraph<T>, Vec<Vec<Option<T>>>), GeomError> {
    if !g1.same_shape(g2) {
        return Err(GeomError::DimensionMismatch(format!(
            "ensemble inputs {}x{}x{} vs {}x{}x{}",
            g1.n_views, g1.height, g1.width, g2.n_views, g2.height, g2.width
        )));
    }
    let e1 = g1.cycle_errors(lookup);
    let e2 = g2.cycle_errors(lookup);
    let mut out = g1.clone();
    let mut chosen = e1.clone();
    for idx in 0..out.pairs.len() {
        let dst = &mut out.pairs[idx];
        let alt = &g2.pairs[idx];
        for px in 0..g1.pixels_per_view() {
            let take_second = match (e1[idx][px], e2[idx][px]) {
                (None, Some(_)) => true,
                (Some(a), Some(b)) => b < a,
                _ => false,
            };
            if take_second {
                dst.target[px] = alt.target[px];
                dst.conf[px] = alt.conf[px];
                dst.valid[px] = alt.valid[px];
                chosen[idx][px] = e2[idx][px];
            }
        }
    }
    Ok((out, chosen))
}

/// Splits a filtered graph into the bundle-adjustment and triangulation
/// subsets by confidence.
pub fn confidence_masks<T: Real>(
    g: &CorrGraph<T>,
    eps_ba: T,
    eps_dlt: T,
) -> Result<(CorrGraph<T>, CorrGraph<T>), GeomError> {
    if !(eps_ba > eps_dlt) {
        return Err(GeomError::ThresholdOrder {
            eps_ba: to_f64(eps_ba),
            eps_dlt: to_f64(eps_dlt),
        });
    }
    Ok((mask_by_confidence(g, eps_ba), mask_by_confidence(g, eps_dlt)))
}

/// Keeps valid entries whose confidence strictly exceeds `threshold`.
pub fn mask_by_confidence<T: Real>(g: &CorrGraph<T>, threshold: T) -> CorrGraph<T> {
    let pairs = g
        .pairs
        .iter()
        .map(|p| PairGrid {
            target: p.target.clone(),
            conf: p.conf.clone(),
            valid: p.valid.iter().zip(&p.conf).map(|(&m, &c)| m && c > threshold).collect(),
        })
        .collect();
    CorrGraph { pairs, ..*g }
}

/// One 2D observation of a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation<T: Real> {
    pub view: usize,
    pub pix: PixelCoord<T>,
}

/// An anchor pixel and its matches in other views. The anchor's own pixel is
/// the first observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Track<T: Real> {
    pub anchor_view: usize,
    /// Integer anchor pixel `(u, v)`.
    pub anchor: (usize, usize),
    pub obs: Vec<Observation<T>>,
    pub saliency: T,
}

impl<T: Real> Track<T> {
    pub fn views(&self) -> impl Iterator<Item = usize> + '_ {
        self.obs.iter().map(|o| o.view)
    }

    /// Checks the track invariants against a `n_views x height x width` setup.
    pub fn validate(&self, n_views: usize, height: usize, width: usize) -> Result<(), GeomError> {
        if self.obs.len() < 2 {
            return Err(GeomError::InvalidArgument("track with fewer than 2 observations".into()));
        }
        let mut seen = vec![false; n_views];
        for o in &self.obs {
            if o.view >= n_views || seen[o.view] {
                return Err(GeomError::InvalidArgument(format!("bad or repeated view {}", o.view)));
            }
            seen[o.view] = true;
            if o.pix.round_in_bounds(width, height).is_none() {
                return Err(GeomError::InvalidArgument("observation out of bounds".into()));
            }
        }
        Ok(())
    }
}

/// One track per anchor pixel with at least one valid outgoing match, ordered
/// by anchor view then row-major anchor pixel.
pub fn build_tracks<T: Real>(g: &CorrGraph<T>) -> Vec<Track<T>> {
    let per_view: Vec<Vec<Track<T>>> = (0..g.n_views)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::new();
            for px in 0..g.pixels_per_view() {
                let (u, v) = (px % g.width, px / g.width);
                let mut obs = vec![Observation {
                    view: i,
                    pix: PixelCoord::new(lit(u as f64), lit(v as f64)),
                }];
                for k in (0..g.n_views).filter(|&k| k != i) {
                    let p = g.pair(i, k);
                    if p.valid[px] {
                        obs.push(Observation {
                            view: k,
                            pix: p.target[px],
                        });
                    }
                }
                if obs.len() >= 2 {
                    out.push(Track {
                        anchor_view: i,
                        anchor: (u, v),
                        obs,
                        saliency: T::zero(),
                    });
                }
            }
            out
        })
        .collect();
    per_view.into_iter().flatten().collect()
}

/// Per-pixel anchor scores for every view.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<T: Real> {
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub scores: Vec<T>,
}

impl<T: Real> SaliencyMap<T> {
    /// Constant scores; selection then falls back to row-major order.
    pub fn uniform(n_views: usize, height: usize, width: usize) -> Self {
        Self {
            n_views,
            height,
            width,
            scores: vec![T::one(); n_views * height * width],
        }
    }

    /// Scharr gradient magnitude of grayscale images (one `height x width`
    /// row-major buffer per view), with replicated borders.
    pub fn from_images(images: &[Vec<T>], height: usize, width: usize) -> Result<Self, GeomError> {
        let mut scores = Vec::with_capacity(images.len() * height * width);
        for img in images {
            if img.len() != height * width {
                return Err(GeomError::DimensionMismatch("image size differs from grid".into()));
            }
            scores.extend(scharr_magnitude(img, height, width));
        }
        Ok(Self {
            n_views: images.len(),
            height,
            width,
            scores,
        })
    }

    pub fn score(&self, view: usize, u: usize, v: usize) -> T {
        self.scores[(view * self.height + v) * self.width + u]
    }
}

fn scharr_magnitude<T: Real>(img: &[T], height: usize, width: usize) -> Vec<T> {
    let at = |u: isize, v: isize| {
        let u = u.clamp(0, width as isize - 1) as usize;
        let v = v.clamp(0, height as isize - 1) as usize;
        img[v * width + u]
    };
    let (three, ten): (T, T) = (lit(3.0), lit(10.0));
    let mut out = Vec::with_capacity(img.len());
    for v in 0..height as isize {
        for u in 0..width as isize {
            let gx = three * (at(u + 1, v - 1) - at(u - 1, v - 1))
                + ten * (at(u + 1, v) - at(u - 1, v))
                + three * (at(u + 1, v + 1) - at(u - 1, v + 1));
            let gy = three * (at(u - 1, v + 1) - at(u - 1, v - 1))
                + ten * (at(u, v + 1) - at(u, v - 1))
                + three * (at(u + 1, v + 1) - at(u + 1, v - 1));
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Keeps, per anchor view, the `n_ba` tracks with the most salient anchors.
/// Ties go to the earlier anchor in row-major order. The returned tracks
/// carry their saliency and are grouped by view, most salient first.
pub fn select_ba_anchors<T: Real>(tracks: &[Track<T>], saliency: &SaliencyMap<T>, n_ba: usize) -> Vec<Track<T>> {
    let mut by_view: Vec<Vec<(usize, T)>> = vec![Vec::new(); saliency.n_views];
    for (idx, t) in tracks.iter().enumerate() {
        if t.obs.len() < 2 || t.anchor_view >= saliency.n_views {
            continue;
        }
        let (u, v) = t.anchor;
        by_view[t.anchor_view].push((idx, saliency.score(t.anchor_view, u, v)));
    }
    let mut out = Vec::new();
    for mut cands in by_view {
        cands.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    let (ta, tb) = (&tracks[a.0], &tracks[b.0]);
                    (ta.anchor.1, ta.anchor.0).cmp(&(tb.anchor.1, tb.anchor.0))
                })
        });
        for (idx, s) in cands.into_iter().take(n_ba) {
            let mut t = tracks[idx].clone();
            t.saliency = s;
            out.push(t);
        }
    }
    out
}
