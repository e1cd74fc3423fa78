//! Seeded synthetic scenes with the two pathologies that matter here: many
//! superpixels per class inside a batch (self-similarity) and a long-tailed
//! class distribution.
//!
//! Frozen superpixel features sit around class means that share a common
//! component, so even cross-class cosines are well above zero. Point
//! features carry the same class and instance information through a
//! different random rotation plus per-point noise, so the encoder has to
//! learn the alignment.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, StandardNormal};

use crate::correspond::{GroupKind, PairSet};
use crate::error::{Error, Result};
use crate::matcore::Matrix;
use crate::rng::substream;
use crate::similarity::superpixel_similarity;

/// Class names of the 16-class lidar segmentation benchmark, in its
/// canonical order.
pub const NUSCENES_CLASSES: [&str; 16] = [
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

const VEGETATION: f64 = 0.2219;
const ROAD_PLUS_VEGETATION: f64 = 0.45;
const PEDESTRIAN: f64 = 0.0025;
const TWO_WHEELERS: f64 = 0.0005;
/// Largest-to-smallest ratio of the log-spaced remainder.
const REMAINDER_SPAN: f64 = 200.0;

/// Superpixel class shares shaped like the driving benchmark: road and
/// vegetation hold 45%, pedestrians 0.25%, motorcycles and bicycles 0.05%
/// together; the other eleven classes share the rest on a log scale.
pub fn nuscenes_like_proportions() -> Vec<f64> {
    let idx = |name: &str| NUSCENES_CLASSES.iter().position(|c| *c == name).unwrap();
    let mut p = vec![0.0; 16];
    p[idx("vegetation")] = VEGETATION;
    p[idx("driveable_surface")] = ROAD_PLUS_VEGETATION - VEGETATION;
    p[idx("pedestrian")] = PEDESTRIAN;
    p[idx("motorcycle")] = TWO_WHEELERS / 2.0;
    p[idx("bicycle")] = TWO_WHEELERS / 2.0;
    // largest first
    let rest = [
        "manmade",
        "sidewalk",
        "terrain",
        "car",
        "other_flat",
        "truck",
        "barrier",
        "bus",
        "trailer",
        "construction_vehicle",
        "traffic_cone",
    ];
    let n = rest.len();
    let raw: Vec<f64> = (0..n)
        .map(|i| (-(REMAINDER_SPAN.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect();
    let budget = 1.0 - ROAD_PLUS_VEGETATION - PEDESTRIAN - TWO_WHEELERS;
    let total: f64 = raw.iter().sum();
    for (name, r) in rest.iter().zip(raw) {
        p[idx(name)] = r / total * budget;
    }
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthGranularity {
    Superpixel,
    /// One pair per point, subsampled to at most `cap` pairs.
    Point { cap: Option<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub num_classes: usize,
    pub class_proportions: Vec<f64>,
    /// Frozen superpixel feature width `C`.
    pub feature_dim: usize,
    /// Raw point feature width.
    pub point_dim: usize,
    /// Norm of each class-specific mean direction.
    pub cluster_separation: f64,
    /// Per-coordinate standard deviation of the instance code.
    pub within_class_spread: f64,
    /// Norm of the mean direction common to every class.
    pub shared_component: f64,
    /// Per-coordinate standard deviation of point-level noise.
    pub point_noise: f64,
    pub superpixels_per_batch: usize,
    /// Inclusive range of points per superpixel.
    pub points_per_superpixel: (usize, usize),
    pub granularity: SynthGranularity,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            num_classes: 16,
            class_proportions: nuscenes_like_proportions(),
            feature_dim: 24,
            point_dim: 48,
            cluster_separation: 1.0,
            within_class_spread: 0.096,
            shared_component: 1.0,
            point_noise: 0.05,
            superpixels_per_batch: 256,
            points_per_superpixel: (4, 12),
            granularity: SynthGranularity::Superpixel,
            seed: 0,
        }
    }
}

impl Scenario {
    /// Long-tailed 16-class scenario.
    pub fn nuscenes_like(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Equal class shares.
    pub fn balanced(num_classes: usize, seed: u64) -> Self {
        Self {
            num_classes,
            class_proportions: vec![1.0 / num_classes as f64; num_classes],
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.class_proportions.len() != self.num_classes {
            return Err(Error::param(format!(
                "{} proportions for {} classes",
                self.class_proportions.len(),
                self.num_classes
            )));
        }
        let total: f64 = self.class_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.class_proportions.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::param(
                "class proportions must be positive and sum to 1",
            ));
        }
        if !(self.cluster_separation > 0.0) || !(self.within_class_spread >= 0.0) {
            return Err(Error::param(
                "separation must be positive and spread nonnegative",
            ));
        }
        if !(self.shared_component >= 0.0) || !(self.point_noise >= 0.0) {
            return Err(Error::param("shared component and point noise must be nonnegative"));
        }
        let needed = self.num_classes + usize::from(self.shared_component > 0.0);
        if self.feature_dim < needed {
            return Err(Error::param(format!(
                "feature_dim {} cannot hold {needed} orthogonal mean directions",
                self.feature_dim
            )));
        }
        if self.point_dim < self.num_classes.max(self.feature_dim) {
            return Err(Error::param(format!(
                "point_dim {} must be at least max(num_classes, feature_dim)",
                self.point_dim
            )));
        }
        let (lo, hi) = self.points_per_superpixel;
        if lo == 0 || hi < lo {
            return Err(Error::param("points per superpixel range must be 1 <= lo <= hi"));
        }
        if self.superpixels_per_batch < 2 {
            return Err(Error::TooFewAnchors(self.superpixels_per_batch));
        }
        Ok(())
    }

    /// Non-fatal concerns about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.superpixels_per_batch < 2 * self.num_classes {
            out.push(format!(
                "{} superpixels per batch is fewer than two per class ({} classes)",
                self.superpixels_per_batch, self.num_classes
            ));
        }
        out
    }
}

/// What the trainer may see: no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// Frozen per-group image features `F` (M×C).
    pub features: Matrix,
    /// Raw per-point features (N×D).
    pub point_features: Matrix,
    pub pairs: PairSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    pub data: TrainingBatch,
    /// Ground-truth class per group, for evaluation only.
    pub class_labels: Vec<usize>,
}

/// Class geometry shared by every batch of a scenario.
#[derive(Clone, Debug)]
pub struct Geometry {
    feature_means: Matrix,
    point_means: Matrix,
    /// D×C, orthonormal columns: instance code into point space.
    instance_map: Matrix,
    /// C×C rotation applied to instance codes in feature space.
    feature_rotation: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `rows × cols` matrix with orthonormal columns (`cols <= rows`).
fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| gaussian(rng));
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    // fix column signs so the result is a deterministic function of `g`
    Matrix::from_fn(rows, cols, |i, j| {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * s
    })
}

impl Geometry {
    pub fn new(s: &Scenario) -> Result<Self> {
        s.validate()?;
        let mut rng = substream(s.seed, "geometry", 0);
        let c = s.feature_dim;
        let d = s.point_dim;
        let k = s.num_classes;
        let feature_rotation = random_orthonormal(c, c, &mut rng);
        let feature_means = Matrix::from_fn(k, c, |cls, col| {
            let axis = s.cluster_separation * feature_rotation.get(col, cls);
            let shared = if s.shared_component > 0.0 {
                s.shared_component * feature_rotation.get(col, k)
            } else {
                0.0
            };
            axis + shared
        });
        let point_rotation = random_orthonormal(d, k, &mut rng);
        let point_means = Matrix::from_fn(k, d, |cls, col| {
            s.cluster_separation * point_rotation.get(col, cls)
        });
        let instance_map = random_orthonormal(d, c, &mut rng);
        Ok(Self {
            feature_means,
            point_means,
            instance_map,
            feature_rotation,
        })
    }
}

/// Samples batch `index` of the scenario.
pub fn generate_batch(s: &Scenario, index: u64) -> Result<SyntheticBatch> {
    let geometry = Geometry::new(s)?;
    generate_with(s, &geometry, &s.class_proportions, index, "batch")
}

/// Samples a batch with replacement class shares (used for evaluation sets).
pub fn generate_with(
    s: &Scenario,
    g: &Geometry,
    proportions: &[f64],
    index: u64,
    purpose: &str,
) -> Result<SyntheticBatch> {
    let m = s.superpixels_per_batch;
    let mut rng = substream(s.seed, purpose, index);
    let dist = WeightedIndex::new(proportions)
        .map_err(|e| Error::param(format!("class proportions: {e}")))?;
    let labels: Vec<usize> = (0..m).map(|_| dist.sample(&mut rng)).collect();
    let sampled = sample_groups(s, g, &labels, &mut rng);
    let Sampled {
        features,
        point_features,
        point_groups,
        pixel_features,
    } = sampled;

    match s.granularity {
        SynthGranularity::Superpixel => {
            let pixel_groups = (0..m).map(|i| vec![i]).collect();
            Ok(SyntheticBatch {
                data: TrainingBatch {
                    features,
                    point_features,
                    pairs: PairSet::new(point_groups, pixel_groups, GroupKind::Superpixel)?,
                },
                class_labels: labels,
            })
        }
        SynthGranularity::Point { cap } => {
            let n = point_features.rows();
            let mut owner = vec![0usize; n];
            for (gi, pts) in point_groups.iter().enumerate() {
                for &p in pts {
                    owner[p] = gi;
                }
            }
            let chosen: Vec<usize> = match cap {
                Some(cap) if cap < n => {
                    let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
                    idx.sort_unstable();
                    idx
                }
                _ => (0..n).collect(),
            };
            let features = pixel_features.select_rows(&chosen)?;
            let class_labels = chosen.iter().map(|&p| labels[owner[p]]).collect();
            let point_groups = chosen.iter().map(|&p| vec![p]).collect();
            let pixel_groups = (0..chosen.len()).map(|i| vec![i]).collect();
            Ok(SyntheticBatch {
                data: TrainingBatch {
                    features,
                    point_features,
                    pairs: PairSet::new(point_groups, pixel_groups, GroupKind::Point)?,
                },
                class_labels,
            })
        }
    }
}

struct Sampled {
    features: Matrix,
    point_features: Matrix,
    point_groups: Vec<Vec<usize>>,
    /// One feature row per point (its superpixel feature plus pixel noise).
    pixel_features: Matrix,
}

fn sample_groups(s: &Scenario, g: &Geometry, labels: &[usize], rng: &mut ChaCha8Rng) -> Sampled {
    let m = labels.len();
    let c = s.feature_dim;
    let d = s.point_dim;
    let point_mode = matches!(s.granularity, SynthGranularity::Point { .. });
    let mut features = Matrix::zeros(m, c);
    let mut point_rows: Vec<f64> = Vec::new();
    let mut pixel_rows: Vec<f64> = Vec::new();
    let mut point_groups = Vec::with_capacity(m);
    let mut n = 0usize;
    let mut code = vec![0.0; c];
    let mut rotated = vec![0.0; c];
    let mut instance = vec![0.0; d];
    for (i, &cls) in labels.iter().enumerate() {
        code.iter_mut().for_each(|z| *z = gaussian(rng));
        for (r, out) in rotated.iter_mut().enumerate() {
            *out = s.within_class_spread
                * (0..c).map(|k| g.feature_rotation.get(r, k) * code[k]).sum::<f64>();
        }
        for (col, f) in features.row_mut(i).iter_mut().enumerate() {
            *f = g.feature_means.get(cls, col) + rotated[col];
        }
        for (r, out) in instance.iter_mut().enumerate() {
            *out = s.within_class_spread
                * (0..c).map(|k| g.instance_map.get(r, k) * code[k]).sum::<f64>();
        }
        let (lo, hi) = s.points_per_superpixel;
        let count = rng.random_range(lo..=hi);
        let mut members = Vec::with_capacity(count);
        for _ in 0..count {
            for col in 0..d {
                let noise = s.point_noise * gaussian(rng);
                point_rows.push(g.point_means.get(cls, col) + instance[col] + noise);
            }
            if point_mode {
                for col in 0..c {
                    let noise = s.within_class_spread * gaussian(rng);
                    pixel_rows.push(features.get(i, col) + noise);
                }
            }
            members.push(n);
            n += 1;
        }
        point_groups.push(members);
    }
    let point_features = Matrix::new(n, d, point_rows).expect("row-major fill");
    let pixel_features = if point_mode {
        Matrix::new(n, c, pixel_rows).expect("row-major fill")
    } else {
        Matrix::zeros(0, c)
    };
    Sampled {
        features,
        point_features,
        point_groups,
        pixel_features,
    }
}

/// Share of (anchor, negative) pairs whose labels agree.
pub fn false_negative_rate(labels: &[usize]) -> f64 {
    let m = labels.len();
    if m < 2 {
        return 0.0;
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let same: usize = counts.iter().map(|&n| n * n.saturating_sub(1)).sum();
    same as f64 / (m * (m - 1)) as f64
}

pub fn class_counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub false_negative_rate: f64,
    pub class_counts: Vec<usize>,
    /// Mean α over same-class pairs `i != j` (NaN when there are none).
    pub within_class_alpha: f64,
    /// Mean α over different-class pairs (NaN when there are none).
    pub cross_class_alpha: f64,
}

pub fn diagnostics(batch: &SyntheticBatch, num_classes: usize) -> Result<Diagnostics> {
    let alpha = superpixel_similarity(&batch.data.features)?;
    let labels = &batch.class_labels;
    let (mut ws, mut wn, mut cs, mut cn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                ws += alpha.get(i, j);
                wn += 1;
            } else {
                cs += alpha.get(i, j);
                cn += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(Diagnostics {
        false_negative_rate: false_negative_rate(labels),
        class_counts: class_counts(labels, num_classes),
        within_class_alpha: mean(ws, wn),
        cross_class_alpha: mean(cs, cn),
    })
}

/// One label per line.
pub fn labels_to_text(labels: &[usize]) -> String {
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}
