//! Point-to-pixel correspondences.
//!
//! Points are projected through a pinhole camera, bucketed by the superpixel
//! their pixel falls in, and the resulting groups drive mean pooling of point
//! and pixel embeddings into matched `(Q, K)` rows. Superpixels that receive
//! no point are dropped.

use std::collections::BTreeMap;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::matcore::{segment_mean_pool, Matrix};
use crate::rng;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Pinhole camera with a rigid LiDAR-to-camera transform.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    intrinsics: [[f64; 3]; 3],
    extrinsics: [[f64; 4]; 4],
    width: usize,
    height: usize,
}

impl CameraModel {
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        extrinsics: [[f64; 4]; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param("camera image must be at least 1x1"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| extrinsics[k][i] * extrinsics[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr - want).abs() > ORTHONORMAL_TOL {
                    return Err(Error::param(format!(
                        "extrinsic rotation is not orthonormal (RᵀR[{i}][{j}] = {rtr})"
                    )));
                }
            }
        }
        Ok(Self {
            intrinsics,
            extrinsics,
            width,
            height,
        })
    }

    /// Focal lengths `fx, fy` and principal point `cx, cy`, identity extrinsics.
    pub fn simple(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let mut ext = [[0.0; 4]; 4];
        for (i, row) in ext.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self::new(
            [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            ext,
            width,
            height,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intrinsics(&self) -> &[[f64; 3]; 3] {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &[[f64; 4]; 4] {
        &self.extrinsics
    }

    /// Parses 9 intrinsic values, 16 extrinsic values (row-major) and
    /// `width height`, in that order. Line breaks are not significant.
    pub fn parse(text: &str) -> Result<Self> {
        let toks: Vec<&str> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace)
            .collect();
        if toks.len() != 27 {
            return Err(Error::Format(format!(
                "camera file needs 27 values, found {}",
                toks.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            toks[i]
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("camera value {:?}: {e}", toks[i])))
        };
        let mut k = [[0.0; 3]; 3];
        for (i, v) in k.iter_mut().flatten().enumerate() {
            *v = num(i)?;
        }
        let mut e = [[0.0; 4]; 4];
        for (i, v) in e.iter_mut().flatten().enumerate() {
            *v = num(9 + i)?;
        }
        let dim = |i: usize| -> Result<usize> {
            toks[i]
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("camera size {:?}: {e}", toks[i])))
        };
        Self::new(k, e, dim(25)?, dim(26)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.intrinsics {
            out.push_str(&format!("{:?} {:?} {:?}\n", row[0], row[1], row[2]));
        }
        for row in &self.extrinsics {
            out.push_str(&format!(
                "{:?} {:?} {:?} {:?}\n",
                row[0], row[1], row[2], row[3]
            ));
        }
        out.push_str(&format!("{} {}\n", self.width, self.height));
        out
    }
}

/// A visible point and the pixel it lands on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projection {
    pub point: usize,
    pub row: usize,
    pub col: usize,
}

/// Projects `points` (N×3) and keeps those in front of the camera and inside
/// the image. Continuous coordinates are floored to pixel indices.
pub fn project_points(points: &Matrix, camera: &CameraModel) -> Result<Vec<Projection>> {
    if points.cols() != 3 {
        return Err(Error::dim(format!(
            "points must have 3 columns, found {}",
            points.cols()
        )));
    }
    let e = &camera.extrinsics;
    let k = &camera.intrinsics;
    let mut out = Vec::new();
    for (idx, p) in points.iter_rows().enumerate() {
        let cam: [f64; 3] =
            std::array::from_fn(|r| e[r][0] * p[0] + e[r][1] * p[1] + e[r][2] * p[2] + e[r][3]);
        let depth = cam[2];
        if !(depth > 0.0) {
            continue;
        }
        let x = cam[0] / depth;
        let y = cam[1] / depth;
        let u = k[0][0] * x + k[0][1] * y + k[0][2];
        let v = k[1][0] * x + k[1][1] * y + k[1][2];
        let w = k[2][0] * x + k[2][1] * y + k[2][2];
        let (u, v) = (u / w, v / w);
        if u >= 0.0 && v >= 0.0 && u < camera.width as f64 && v < camera.height as f64 {
            out.push(Projection {
                point: idx,
                row: v.floor() as usize,
                col: u.floor() as usize,
            });
        }
    }
    Ok(out)
}

/// Per-pixel superpixel ids for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    width: usize,
    height: usize,
    num_segments: usize,
    ids: Vec<usize>,
}

impl SegmentMap {
    pub fn new(width: usize, height: usize, num_segments: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::dim(format!(
                "{} ids for a {width}x{height} image",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= num_segments) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: num_segments,
            });
        }
        Ok(Self {
            width,
            height,
            num_segments,
            ids,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn id_at(&self, row: usize, col: usize) -> usize {
        self.ids[row * self.width + col]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// `height width num_segments` header, then one line of ids per image row.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let parse_line = |ln: usize, l: &str| -> Result<Vec<usize>> {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<usize>().map_err(|e| Error::Parse {
                        line: ln + 1,
                        msg: format!("{t:?}: {e}"),
                    })
                })
                .collect()
        };
        let (hl, header) = lines.next().ok_or(Error::Empty("segment map"))?;
        let [height, width, num_segments] = parse_line(hl, header)?[..] else {
            return Err(Error::Parse {
                line: hl + 1,
                msg: "expected `height width num_segments`".into(),
            });
        };
        let mut ids = Vec::with_capacity(width * height);
        for _ in 0..height {
            let (ln, l) = lines.next().ok_or(Error::Parse {
                line: 0,
                msg: format!("expected {height} rows of ids"),
            })?;
            let row = parse_line(ln, l)?;
            if row.len() != width {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("expected {width} ids, found {}", row.len()),
                });
            }
            ids.extend(row);
        }
        Self::new(width, height, num_segments, ids)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.height, self.width, self.num_segments);
        for r in 0..self.height {
            let row: Vec<String> = self.ids[r * self.width..(r + 1) * self.width]
                .iter()
                .map(usize::to_string)
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Superpixel,
    Point,
}

/// How `build_pairs` groups projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// One group per occupied superpixel.
    Superpixel,
    /// One group per (point, pixel) pair, optionally subsampled to `cap`
    /// pairs without replacement.
    Point { cap: Option<usize>, seed: u64 },
}

/// Matched superpoint / superpixel index groups. Group `g` pairs the points
/// in `point_groups[g]` with the pixels in `pixel_groups[g]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSet {
    point_groups: Vec<Vec<usize>>,
    pixel_groups: Vec<Vec<usize>>,
    kind: GroupKind,
}

impl PairSet {
    pub fn new(
        point_groups: Vec<Vec<usize>>,
        pixel_groups: Vec<Vec<usize>>,
        kind: GroupKind,
    ) -> Result<Self> {
        if point_groups.len() != pixel_groups.len() {
            return Err(Error::dim(format!(
                "{} point groups vs {} pixel groups",
                point_groups.len(),
                pixel_groups.len()
            )));
        }
        for (g, (p, x)) in point_groups.iter().zip(&pixel_groups).enumerate() {
            if p.is_empty() || x.is_empty() {
                return Err(Error::EmptyGroup(g));
            }
            if kind == GroupKind::Point && (p.len() != 1 || x.len() != 1) {
                return Err(Error::param(format!(
                    "point-granularity group {g} must hold exactly one point and one pixel"
                )));
            }
        }
        Ok(Self {
            point_groups,
            pixel_groups,
            kind,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.point_groups.len()
    }

    pub fn point_groups(&self) -> &[Vec<usize>] {
        &self.point_groups
    }

    pub fn pixel_groups(&self) -> &[Vec<usize>] {
        &self.pixel_groups
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    /// Concatenates per-camera pair sets. Point indices refer to the shared
    /// cloud; each camera's pixel indices are shifted by its offset.
    pub fn concat(parts: &[(PairSet, usize)]) -> Result<Self> {
        let kind = parts.first().map_or(GroupKind::Superpixel, |(p, _)| p.kind);
        let mut points = Vec::new();
        let mut pixels = Vec::new();
        for (set, offset) in parts {
            if set.kind != kind {
                return Err(Error::param("cannot mix granularities"));
            }
            points.extend(set.point_groups.iter().cloned());
            pixels.extend(
                set.pixel_groups
                    .iter()
                    .map(|g| g.iter().map(|p| p + offset).collect()),
            );
        }
        Self::new(points, pixels, kind)
    }
}

/// Groups projected points by superpixel (or by pair) for one image.
pub fn build_pairs(
    projections: &[Projection],
    segments: &SegmentMap,
    granularity: Granularity,
) -> Result<PairSet> {
    if projections.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for p in projections {
        if p.row >= segments.height || p.col >= segments.width {
            return Err(Error::IndexOutOfRange {
                index: p.row * segments.width + p.col,
                len: segments.width * segments.height,
            });
        }
    }
    match granularity {
        Granularity::Superpixel => {
            let mut by_segment: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for p in projections {
                by_segment
                    .entry(segments.id_at(p.row, p.col))
                    .or_default()
                    .push(p.point);
            }
            let mut pixels_of: Vec<Vec<usize>> = vec![Vec::new(); segments.num_segments];
            for (pix, &id) in segments.ids.iter().enumerate() {
                pixels_of[id].push(pix);
            }
            let (points, pixels) = by_segment
                .into_iter()
                .map(|(id, pts)| (pts, std::mem::take(&mut pixels_of[id])))
                .unzip();
            PairSet::new(points, pixels, GroupKind::Superpixel)
        }
        Granularity::Point { cap, seed } => {
            let n = projections.len();
            let chosen: Vec<usize> = match cap {
                Some(c) if c < n => {
                    let mut r = rng::substream(seed, "pair-subsample", 0);
                    let mut idx = index::sample(&mut r, n, c).into_vec();
                    idx.sort_unstable();
                    idx
                }
                _ => (0..n).collect(),
            };
            let (points, pixels) = chosen
                .into_iter()
                .map(|i| {
                    let p = projections[i];
                    (vec![p.point], vec![p.row * segments.width + p.col])
                })
                .unzip();
            PairSet::new(points, pixels, GroupKind::Point)
        }
    }
}

/// Mean-pools point and pixel embeddings over each group.
pub fn pool_pair_embeddings(
    point_emb: &Matrix,
    pixel_emb: &Matrix,
    pairs: &PairSet,
) -> Result<(Matrix, Matrix)> {
    if point_emb.cols() != pixel_emb.cols() {
        return Err(Error::dim(format!(
            "point embeddings have {} columns, pixel embeddings {}",
            point_emb.cols(),
            pixel_emb.cols()
        )));
    }
    let q = pool_groups(point_emb, &pairs.point_groups)?;
    let k = pool_groups(pixel_emb, &pairs.pixel_groups)?;
    Ok((q, k))
}

pub(crate) fn pool_groups(x: &Matrix, groups: &[Vec<usize>]) -> Result<Matrix> {
    if groups.iter().all(|g| g.len() == 1) {
        let idx: Vec<usize> = groups.iter().map(|g| g[0]).collect();
        return x.select_rows(&idx);
    }
    let members: Vec<usize> = groups.iter().flatten().copied().collect();
    let labels: Vec<usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, m)| std::iter::repeat_n(g, m.len()))
        .collect();
    segment_mean_pool(&x.select_rows(&members)?, &labels, groups.len())
}
