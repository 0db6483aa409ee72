//! On-disk formats.
//!
//! Text formats are whitespace separated with `#` comments. Binary formats
//! are little-endian with a four byte magic:
//!
//! * `PMAP`: u32 n, H, W; n*H*W*3 f32 points (view-major, row-major);
//!   n*H*W f32 confidence; n*H*W u8 validity.
//! * `CORR`: u32 n, H, W; then per ordered pair `(i, k)`, `i != k`, in
//!   lexicographic order: H*W*2 f32 targets (u, v), H*W f32 confidence,
//!   H*W u8 validity.
//! * `SALI`: u32 n, H, W; n*H*W f32 scores.
//! * `PTCH` / `ROUT`: refiner request and reply frames, see
//!   [`write_patch_frame`] and [`write_output_frame`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, Vector3};

use crate::error::IoError;
use crate::matching::{CorrGraph, Observation, PairGrid, SaliencyMap, Track};
use crate::refine::{Embedding, Link, Patch, RefinerOutput, EMBED_DIM};
use crate::scalar::{lit, to_f64, Real};
use crate::scene::{CameraParams, Intrinsics, PixelCoord, PointMapSet};
use crate::triangulate::{GuidedCloud, PixelRef};

pub const CLOUD_HEADER: &str = "# ggsfm-cloud v1";
const NO_LINK: u32 = u32::MAX;

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|e| IoError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(|e| IoError::io(path, e))
}

fn finish(path: &Path, w: BufWriter<File>) -> Result<(), IoError> {
    w.into_inner()
        .map_err(|e| IoError::io(path, e.into_error()))?
        .sync_all()
        .map_err(|e| IoError::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-comment lines split into fields, with 1-based line numbers.
fn records(path: &Path) -> Result<Vec<(usize, Vec<String>)>, IoError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        let body = line.split('#').next().unwrap_or("");
        let fields: Vec<String> = body.split_whitespace().map(str::to_owned).collect();
        if !fields.is_empty() {
            out.push((i + 1, fields));
        }
    }
    Ok(out)
}

fn field<F: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<F, IoError> {
    s.parse().map_err(|_| parse_err(path, line, format!("cannot parse `{s}`")))
}

fn expect_fields(path: &Path, line: usize, fields: &[String], n: usize) -> Result<(), IoError> {
    if fields.len() != n {
        return Err(parse_err(path, line, format!("expected {n} fields, found {}", fields.len())));
    }
    Ok(())
}

/// Reads `id qw qx qy qz tx ty tz fx fy cx cy` lines; ids must be `0..n`.
pub fn read_cameras(path: &Path) -> Result<Vec<CameraParams<f64>>, IoError> {
    let mut by_id = BTreeMap::new();
    for (line, f) in records(path)? {
        expect_fields(path, line, &f, 12)?;
        let id: usize = field(path, line, &f[0])?;
        let v = f[1..]
            .iter()
            .map(|s| field::<f64>(path, line, s))
            .collect::<Result<Vec<_>, _>>()?;
        let cam = CameraParams::new(
            Quaternion::new(v[0], v[1], v[2], v[3]),
            Vector3::new(v[4], v[5], v[6]),
            Intrinsics::new(v[7], v[8], v[9], v[10]),
        )
        .map_err(|e| parse_err(path, line, e.to_string()))?;
        if by_id.insert(id, cam).is_some() {
            return Err(parse_err(path, line, format!("duplicate camera id {id}")));
        }
    }
    if by_id.keys().enumerate().any(|(i, &id)| i != id) {
        return Err(IoError::format(path, "camera ids must be 0..n"));
    }
    Ok(by_id.into_values().collect())
}

pub fn write_cameras(path: &Path, cams: &[CameraParams<f64>]) -> Result<(), IoError> {
    let mut w = create(path)?;
    let mut body = String::from("# id qw qx qy qz tx ty tz fx fy cx cy\n");
    for (i, c) in cams.iter().enumerate() {
        let q = c.q.quaternion();
        let k = &c.intrinsics;
        body.push_str(&format!(
            "{i} {} {} {} {} {} {} {} {} {} {} {}\n",
            q.w, q.i, q.j, q.k, c.t.x, c.t.y, c.t.z, k.fx, k.fy, k.cx, k.cy
        ));
    }
    w.write_all(body.as_bytes()).map_err(|e| IoError::io(path, e))?;
    finish(path, w)
}

struct Bin<'a, R: Read> {
    r: R,
    path: &'a Path,
}

impl<R: Read> Bin<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, IoError> {
        let mut buf = vec![0u8; n];
        self.r.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                IoError::format(self.path, "truncated file")
            } else {
                IoError::io(self.path, e)
            }
        })?;
        Ok(buf)
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<(), IoError> {
        if self.bytes(4)? != m {
            return Err(IoError::format(self.path, format!("missing {} magic", String::from_utf8_lossy(m))));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, IoError> {
        let b = self.bytes(4 * n)?;
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn f32s<T: Real>(&mut self, n: usize) -> Result<Vec<T>, IoError> {
        let b = self.bytes(4 * n)?;
        Ok(b.chunks_exact(4)
            .map(|c| lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect())
    }

    fn flags(&mut self, n: usize) -> Result<Vec<bool>, IoError> {
        Ok(self.bytes(n)?.into_iter().map(|b| b != 0).collect())
    }

    fn dims(&mut self) -> Result<(usize, usize, usize), IoError> {
        Ok((self.u32()? as usize, self.u32()? as usize, self.u32()? as usize))
    }

    fn end(&mut self) -> Result<(), IoError> {
        let mut rest = [0u8; 1];
        match self.r.read(&mut rest) {
            Ok(0) => Ok(()),
            Ok(_) => Err(IoError::format(self.path, "trailing bytes")),
            Err(e) => Err(IoError::io(self.path, e)),
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32<T: Real>(buf: &mut Vec<u8>, v: T) {
    buf.extend_from_slice(&(to_f64(v) as f32).to_le_bytes());
}

fn put_dims(buf: &mut Vec<u8>, n: usize, h: usize, w: usize) {
    for d in [n, h, w] {
        put_u32(buf, d as u32);
    }
}

fn write_bytes(path: &Path, buf: &[u8]) -> Result<(), IoError> {
    let mut w = create(path)?;
    w.write_all(buf).map_err(|e| IoError::io(path, e))?;
    finish(path, w)
}

pub fn read_pointmap<T: Real>(path: &Path) -> Result<PointMapSet<T>, IoError> {
    let mut b = Bin { r: open(path)?, path };
    b.magic(b"PMAP")?;
    let (n, h, w) = b.dims()?;
    let len = n * h * w;
    let xyz = b.f32s::<T>(3 * len)?;
    let confidence = b.f32s(len)?;
    let valid = b.flags(len)?;
    b.end()?;
    let pm = PointMapSet {
        n_views: n,
        height: h,
        width: w,
        points: xyz.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
        confidence,
        valid,
    };
    pm.validate().map_err(|e| IoError::format(path, e.to_string()))?;
    Ok(pm)
}

pub fn write_pointmap<T: Real>(path: &Path, pm: &PointMapSet<T>) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(16 + pm.len() * 17);
    buf.extend_from_slice(b"PMAP");
    put_dims(&mut buf, pm.n_views, pm.height, pm.width);
    for p in &pm.points {
        for &c in p.iter() {
            put_f32(&mut buf, c);
        }
    }
    for &c in &pm.confidence {
        put_f32(&mut buf, c);
    }
    buf.extend(pm.valid.iter().map(|&v| v as u8));
    write_bytes(path, &buf)
}

pub fn read_corr<T: Real>(path: &Path) -> Result<CorrGraph<T>, IoError> {
    let mut b = Bin { r: open(path)?, path };
    b.magic(b"CORR")?;
    let (n, h, w) = b.dims()?;
    let len = h * w;
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
    for _ in 0..n * n.saturating_sub(1) {
        let t = b.f32s::<T>(2 * len)?;
        let conf = b.f32s(len)?;
        let valid = b.flags(len)?;
        pairs.push(PairGrid {
            target: t.chunks_exact(2).map(|c| PixelCoord::new(c[0], c[1])).collect(),
            conf,
            valid,
        });
    }
    b.end()?;
    CorrGraph::from_pairs(n, h, w, pairs).map_err(|e| IoError::format(path, e.to_string()))
}

pub fn write_corr<T: Real>(path: &Path, g: &CorrGraph<T>) -> Result<(), IoError> {
    let len = g.pixels_per_view();
    let mut buf = Vec::with_capacity(16 + g.pairs().len() * len * 13);
    buf.extend_from_slice(b"CORR");
    put_dims(&mut buf, g.n_views, g.height, g.width);
    for p in g.pairs() {
        for t in &p.target {
            put_f32(&mut buf, t.u);
            put_f32(&mut buf, t.v);
        }
        for &c in &p.conf {
            put_f32(&mut buf, c);
        }
        buf.extend(p.valid.iter().map(|&v| v as u8));
    }
    write_bytes(path, &buf)
}

pub fn read_saliency<T: Real>(path: &Path) -> Result<SaliencyMap<T>, IoError> {
    let mut b = Bin { r: open(path)?, path };
    b.magic(b"SALI")?;
    let (n, h, w) = b.dims()?;
    let scores = b.f32s(n * h * w)?;
    b.end()?;
    Ok(SaliencyMap {
        n_views: n,
        height: h,
        width: w,
        scores,
    })
}

pub fn write_saliency<T: Real>(path: &Path, s: &SaliencyMap<T>) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(16 + 4 * s.scores.len());
    buf.extend_from_slice(b"SALI");
    put_dims(&mut buf, s.n_views, s.height, s.width);
    for &c in &s.scores {
        put_f32(&mut buf, c);
    }
    write_bytes(path, &buf)
}

/// Reads `track_id view u v` lines. The first observation of each track is
/// its anchor; tracks are returned in ascending id order with their ids.
pub fn read_tracks(path: &Path) -> Result<Vec<(usize, Track<f64>)>, IoError> {
    let mut by_id: BTreeMap<usize, Track<f64>> = BTreeMap::new();
    for (line, f) in records(path)? {
        expect_fields(path, line, &f, 4)?;
        let id: usize = field(path, line, &f[0])?;
        let view: usize = field(path, line, &f[1])?;
        let u: f64 = field(path, line, &f[2])?;
        let v: f64 = field(path, line, &f[3])?;
        if !(u.is_finite() && v.is_finite()) {
            return Err(parse_err(path, line, "non-finite pixel"));
        }
        let t = by_id.entry(id).or_insert_with(|| Track {
            anchor_view: view,
            anchor: (u.round().max(0.0) as usize, v.round().max(0.0) as usize),
            obs: Vec::new(),
            saliency: 0.0,
        });
        t.obs.push(Observation {
            view,
            pix: PixelCoord::new(u, v),
        });
    }
    Ok(by_id.into_iter().collect())
}

pub fn write_tracks(path: &Path, tracks: &[Track<f64>]) -> Result<(), IoError> {
    let mut body = String::from("# track_id view u v\n");
    for (id, t) in tracks.iter().enumerate() {
        for o in &t.obs {
            body.push_str(&format!("{id} {} {} {}\n", o.view, o.pix.u, o.pix.v));
        }
    }
    write_bytes(path, body.as_bytes())
}

/// Reads `id x y z` lines in file order.
pub fn read_points(path: &Path) -> Result<Vec<(usize, Vector3<f64>)>, IoError> {
    records(path)?
        .into_iter()
        .map(|(line, f)| {
            expect_fields(path, line, &f, 4)?;
            let id = field(path, line, &f[0])?;
            let x = Vector3::new(field(path, line, &f[1])?, field(path, line, &f[2])?, field(path, line, &f[3])?);
            Ok((id, x))
        })
        .collect()
}

/// Writes `id x y z` lines with ids `0..n`, under an optional header line.
pub fn write_points(path: &Path, points: &[Vector3<f64>], header: Option<&str>) -> Result<(), IoError> {
    let mut body = String::new();
    if let Some(h) = header {
        body.push_str(h);
        body.push('\n');
    }
    for (i, p) in points.iter().enumerate() {
        body.push_str(&format!("{i} {} {} {}\n", p.x, p.y, p.z));
    }
    write_bytes(path, body.as_bytes())
}

/// Reads a cloud file; ids must be `0..n`.
pub fn read_cloud(path: &Path) -> Result<Vec<Vector3<f64>>, IoError> {
    let first = open(path)?
        .lines()
        .next()
        .transpose()
        .map_err(|e| IoError::io(path, e))?
        .unwrap_or_default();
    if first.trim() != CLOUD_HEADER {
        return Err(IoError::format(path, format!("expected `{CLOUD_HEADER}` header")));
    }
    let pts = read_points(path)?;
    if pts.iter().enumerate().any(|(i, (id, _))| i != *id) {
        return Err(IoError::format(path, "point ids must be 0..n in order"));
    }
    Ok(pts.into_iter().map(|(_, p)| p).collect())
}

pub fn write_cloud(path: &Path, points: &[Vector3<f64>]) -> Result<(), IoError> {
    write_points(path, points, Some(CLOUD_HEADER))
}

/// Reads `point_id view u v` lines into per-point pixel lists.
pub fn read_assoc(path: &Path, n_points: usize) -> Result<Vec<Vec<PixelRef>>, IoError> {
    let mut out = vec![Vec::new(); n_points];
    for (line, f) in records(path)? {
        expect_fields(path, line, &f, 4)?;
        let id: usize = field(path, line, &f[0])?;
        if id >= n_points {
            return Err(parse_err(path, line, format!("point {id} not in cloud")));
        }
        out[id].push(PixelRef {
            view: field(path, line, &f[1])?,
            u: field(path, line, &f[2])?,
            v: field(path, line, &f[3])?,
        });
    }
    Ok(out)
}

pub fn write_assoc(path: &Path, assoc: &[Vec<PixelRef>]) -> Result<(), IoError> {
    let mut body = String::from("# point_id view u v\n");
    for (i, links) in assoc.iter().enumerate() {
        for p in links {
            body.push_str(&format!("{i} {} {} {}\n", p.view, p.u, p.v));
        }
    }
    write_bytes(path, body.as_bytes())
}

/// Loads a cloud plus its associations onto a dense grid.
pub fn read_guided_cloud(
    cloud: &Path,
    assoc: &Path,
    n_views: usize,
    height: usize,
    width: usize,
) -> Result<GuidedCloud<f64>, IoError> {
    let points = read_cloud(cloud)?;
    let links = read_assoc(assoc, points.len())?;
    GuidedCloud::from_parts(n_views, height, width, points, links).map_err(|e| IoError::format(assoc, e.to_string()))
}

fn stream_path() -> PathBuf {
    PathBuf::from("<stream>")
}

/// `PTCH`: u32 n_guide, n_dense; n_dense u32 links (index into the guide
/// list, `u32::MAX` for none); f32 guide xyz; f32 dense xyz; f32 link xyz
/// (zero where unlinked); f32 half-width; f32 embeddings, guides first.
pub fn write_patch_frame<T: Real, W: Write>(w: &mut W, patch: &Patch<T>, emb: &[Embedding<T>]) -> Result<(), IoError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"PTCH");
    put_u32(&mut buf, patch.guide_idx.len() as u32);
    put_u32(&mut buf, patch.dense_idx.len() as u32);
    for l in &patch.links {
        put_u32(&mut buf, l.map_or(NO_LINK, |l| l.local as u32));
    }
    let zero = Vector3::zeros();
    let link_xyz = patch.links.iter().map(|l| l.as_ref().map_or(&zero, |l| &l.target));
    for p in patch.guide_norm.iter().chain(&patch.dense_norm).chain(link_xyz) {
        for &c in p.iter() {
            put_f32(&mut buf, c);
        }
    }
    put_f32(&mut buf, patch.half_width);
    for e in emb {
        for &c in e.iter() {
            put_f32(&mut buf, c);
        }
    }
    w.write_all(&buf).map_err(|e| IoError::io(stream_path(), e))?;
    w.flush().map_err(|e| IoError::io(stream_path(), e))
}

/// Decodes a `PTCH` frame. World placement is not transmitted, so the patch
/// is centered at the origin and indices are positional.
pub fn read_patch_frame<T: Real, R: Read>(r: &mut R) -> Result<(Patch<T>, Vec<Embedding<T>>), IoError> {
    let path = stream_path();
    let mut b = Bin { r, path: &path };
    b.magic(b"PTCH")?;
    let n_g = b.u32()? as usize;
    let n_d = b.u32()? as usize;
    let links = b.u32s(n_d)?;
    let to_vecs = |v: Vec<T>| v.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
    let guide_norm = to_vecs(b.f32s(3 * n_g)?);
    let dense_norm = to_vecs(b.f32s(3 * n_d)?);
    let link_xyz = to_vecs(b.f32s(3 * n_d)?);
    let half_width = b.f32s::<T>(1)?[0];
    let flat = b.f32s::<T>((n_g + n_d) * EMBED_DIM)?;
    let emb = flat
        .chunks_exact(EMBED_DIM)
        .map(|c| {
            let mut e = [T::zero(); EMBED_DIM];
            e.copy_from_slice(c);
            e
        })
        .collect();
    let links = links
        .iter()
        .zip(link_xyz)
        .map(|(&l, target)| match l {
            NO_LINK => Ok(None),
            l if (l as usize) < n_g => Ok(Some(Link {
                guide: l as usize,
                local: l as usize,
                target,
            })),
            _ => Err(IoError::format(&path, "link index outside the guide list")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let patch = Patch {
        center: Vector3::zeros(),
        half_width,
        dense_idx: (0..n_d).collect(),
        guide_idx: (0..n_g).collect(),
        guide_norm,
        dense_norm,
        links,
    };
    Ok((patch, emb))
}

/// `ROUT`: u32 n; n rows of f32 `dx dy dz c_raw`, guides first.
pub fn write_output_frame<T: Real, W: Write>(w: &mut W, out: &RefinerOutput<T>) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(8 + 16 * out.delta.len());
    buf.extend_from_slice(b"ROUT");
    put_u32(&mut buf, out.delta.len() as u32);
    for (d, &c) in out.delta.iter().zip(&out.c_raw) {
        for &x in d.iter() {
            put_f32(&mut buf, x);
        }
        put_f32(&mut buf, c);
    }
    w.write_all(&buf).map_err(|e| IoError::io(stream_path(), e))?;
    w.flush().map_err(|e| IoError::io(stream_path(), e))
}

pub fn read_output_frame<T: Real, R: Read>(r: &mut R) -> Result<RefinerOutput<T>, IoError> {
    let path = stream_path();
    let mut b = Bin { r, path: &path };
    b.magic(b"ROUT")?;
    let n = b.u32()? as usize;
    let rows = b.f32s::<T>(4 * n)?;
    b.end()?;
    Ok(RefinerOutput {
        delta: rows.chunks_exact(4).map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
        c_raw: rows.chunks_exact(4).map(|c| c[3]).collect(),
    })
}
