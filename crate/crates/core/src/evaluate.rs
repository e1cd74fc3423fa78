//! Representation quality: ridge linear probe, minority/majority grouping,
//! uniformity and tolerance.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::matcore::{dot, l2_normalize_rows, logsumexp, Matrix};
use crate::rng::substream;

pub const DEFAULT_MINORITY_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSettings {
    pub ridge_lambda: f64,
    pub split_seed: u64,
    /// Share of each class held out for testing.
    pub test_fraction: f64,
    pub minority_threshold: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            ridge_lambda: 1e-3,
            split_seed: 0,
            test_fraction: 0.2,
            minority_threshold: DEFAULT_MINORITY_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassResult {
    /// Held-out recall.
    pub accuracy: f64,
    pub test_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub per_class: BTreeMap<usize, ClassResult>,
    pub overall_accuracy: f64,
    /// Mean per-class accuracy over minority classes present; `None` before
    /// [`ProbeReport::assign_groups`] or when the group is empty.
    pub minority_mean: Option<f64>,
    pub majority_mean: Option<f64>,
    pub minority: Vec<usize>,
    pub majority: Vec<usize>,
    /// Classes with fewer than two samples, left out of the probe.
    pub dropped: Vec<usize>,
    pub warnings: Vec<String>,
}

impl ProbeReport {
    pub fn per_class_accuracy(&self) -> BTreeMap<usize, f64> {
        self.per_class.iter().map(|(&c, r)| (c, r.accuracy)).collect()
    }

    /// Splits the reported classes by training-distribution share.
    pub fn assign_groups(&mut self, proportions: &[f64], threshold: f64) {
        let (minority, majority) = minority_majority_split(proportions, threshold);
        let present = |set: Vec<usize>| -> Vec<usize> {
            set.into_iter().filter(|c| self.per_class.contains_key(c)).collect()
        };
        self.minority = present(minority);
        self.majority = present(majority);
        let mean = |set: &[usize]| {
            (!set.is_empty()).then(|| {
                set.iter().map(|c| self.per_class[c].accuracy).sum::<f64>() / set.len() as f64
            })
        };
        self.minority_mean = mean(&self.minority);
        self.majority_mean = mean(&self.majority);
    }

    /// JSON text with a per-class table and the aggregates.
    pub fn to_json(&self, class_names: Option<&[&str]>) -> String {
        let classes: Vec<serde_json::Value> = self
            .per_class
            .iter()
            .map(|(&c, r)| {
                let group = if self.minority.contains(&c) {
                    "minority"
                } else if self.majority.contains(&c) {
                    "majority"
                } else {
                    "unassigned"
                };
                serde_json::json!({
                    "class": c,
                    "name": class_names.and_then(|n| n.get(c)).copied(),
                    "accuracy": r.accuracy,
                    "test_count": r.test_count,
                    "group": group,
                })
            })
            .collect();
        let report = serde_json::json!({
            "overall_accuracy": self.overall_accuracy,
            "minority_mean": self.minority_mean,
            "majority_mean": self.majority_mean,
            "per_class": classes,
            "dropped_classes": self.dropped,
            "warnings": self.warnings,
        });
        serde_json::to_string_pretty(&report).expect("report serializes")
    }
}

/// Stratified split: per class, a seeded shuffle then `test_fraction` held
/// out (at least one test and one train sample each).
pub fn stratified_split(
    labels: &[usize],
    test_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&c, idx) in by_class.iter_mut() {
        if idx.len() < 2 {
            continue;
        }
        idx.shuffle(&mut substream(seed, "probe-split", c as u64));
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// One-vs-all ridge classifier with an unpenalized bias.
#[derive(Clone, Debug)]
pub struct RidgeClassifier {
    classes: Vec<usize>,
    weights: DMatrix<f64>,
    bias: Vec<f64>,
}

impl RidgeClassifier {
    pub fn fit(x: &Matrix, labels: &[usize], lambda: f64) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::dim(format!("{} rows for {} labels", x.rows(), labels.len())));
        }
        if x.rows() == 0 {
            return Err(Error::Empty("probe training set"));
        }
        if !(lambda >= 0.0) {
            return Err(Error::param("ridge lambda must be nonnegative"));
        }
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let (n, e, k) = (x.rows(), x.cols(), classes.len());
        let col = |c: usize| classes.binary_search(&c).expect("known class");

        let x_mean: Vec<f64> = x.column_sums().iter().map(|s| s / n as f64).collect();
        let xc = DMatrix::from_fn(n, e, |i, j| x.get(i, j) - x_mean[j]);
        let mut y_mean = vec![0.0; k];
        for &c in labels {
            y_mean[col(c)] += 1.0 / n as f64;
        }
        let yc = DMatrix::from_fn(n, k, |i, j| f64::from(u8::from(col(labels[i]) == j)) - y_mean[j]);

        let mut gram = xc.transpose() * &xc;
        for d in 0..e {
            gram[(d, d)] += lambda;
        }
        let rhs = xc.transpose() * &yc;
        let weights = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => gram
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| Error::param(format!("ridge system: {e}")))?,
        };
        let bias = (0..k)
            .map(|j| y_mean[j] - (0..e).map(|d| x_mean[d] * weights[(d, j)]).sum::<f64>())
            .collect();
        Ok(Self { classes, weights, bias })
    }

    /// Argmax class per row; ties go to the smaller class id.
    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        x.iter_rows()
            .map(|row| {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for (j, &c) in self.classes.iter().enumerate() {
                    let score = self.bias[j]
                        + row.iter().enumerate().map(|(d, v)| v * self.weights[(d, j)]).sum::<f64>();
                    if score > best.0 {
                        best = (score, c);
                    }
                }
                best.1
            })
            .collect()
    }
}

/// Trains on a stratified split and reports held-out per-class recall.
pub fn linear_probe(embeddings: &Matrix, labels: &[usize], settings: &ProbeSettings) -> Result<ProbeReport> {
    if embeddings.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} embeddings for {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in labels {
        *counts.entry(c).or_default() += 1;
    }
    let dropped: Vec<usize> = counts.iter().filter(|(_, &n)| n < 2).map(|(&c, _)| c).collect();
    let warnings = dropped
        .iter()
        .map(|c| format!("class {c} has fewer than 2 samples and was dropped"))
        .collect();
    if counts.len() - dropped.len() < 2 {
        return Err(Error::param("linear probe needs at least two classes with 2+ samples"));
    }

    let (train, test) = stratified_split(labels, settings.test_fraction, settings.split_seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let clf = RidgeClassifier::fit(&embeddings.select_rows(&train)?, &pick(&train), settings.ridge_lambda)?;
    let truth = pick(&test);
    let predicted = clf.predict(&embeddings.select_rows(&test)?);

    let mut per_class: BTreeMap<usize, ClassResult> = BTreeMap::new();
    let mut correct = 0usize;
    for (&t, &p) in truth.iter().zip(&predicted) {
        let entry = per_class.entry(t).or_insert(ClassResult { accuracy: 0.0, test_count: 0 });
        entry.test_count += 1;
        if t == p {
            entry.accuracy += 1.0;
            correct += 1;
        }
    }
    for r in per_class.values_mut() {
        r.accuracy /= r.test_count as f64;
    }
    Ok(ProbeReport {
        per_class,
        overall_accuracy: correct as f64 / truth.len() as f64,
        minority_mean: None,
        majority_mean: None,
        minority: Vec::new(),
        majority: Vec::new(),
        dropped,
        warnings,
    })
}

/// Class `c` is majority iff its share is strictly above `threshold`.
pub fn minority_majority_split(proportions: &[f64], threshold: f64) -> (Vec<usize>, Vec<usize>) {
    (0..proportions.len()).partition(|&c| !(proportions[c] > threshold))
}

/// `log mean_{i≠j} exp(−2 ‖x_i − x_j‖²)` over ℓ2-normalized rows.
pub fn uniformity(embeddings: &Matrix) -> Result<f64> {
    let m = embeddings.rows();
    if m < 2 {
        return Err(Error::TooFewAnchors(m));
    }
    let x = l2_normalize_rows(embeddings, 1e-12);
    let mut terms = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            let d2: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            terms.push(-2.0 * d2);
        }
    }
    // ordered pairs count each unordered pair twice, which cancels in the mean
    Ok(logsumexp(&terms)? - ((m * (m - 1) / 2) as f64).ln())
}

/// Mean cosine similarity over same-class pairs `i ≠ j`.
pub fn tolerance(embeddings: &Matrix, labels: &[usize]) -> Result<f64> {
    if embeddings.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} embeddings for {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let x = l2_normalize_rows(embeddings, 1e-12);
    let (mut sum, mut pairs) = (0.0, 0usize);
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            if labels[i] == labels[j] {
                sum += dot(x.row(i), x.row(j));
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::param("tolerance needs at least one same-class pair"));
    }
    Ok(sum / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn blobs(per_class: usize, spread: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[3.0, 0.0, 1.0], [-3.0, 1.0, 0.0], [0.0, -3.0, 2.0]];
        let labels: Vec<usize> = (0..3 * per_class).map(|i| i % 3).collect();
        let x = Matrix::from_fn(labels.len(), 3, |i, j| {
            centers[labels[i]][j] + spread * rng.random_range(-1.0..1.0)
        });
        (x, labels)
    }

    #[test]
    fn separable_blobs_are_perfect() {
        let (x, labels) = blobs(20, 0.0, 1);
        let r = linear_probe(&x, &labels, &ProbeSettings::default()).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert!(r.per_class.values().all(|c| c.accuracy == 1.0));
    }

    #[test]
    fn shuffled_labels_fall_to_chance() {
        // permutation null: accuracy ≈ majority prior, mean over seeds within 3σ
        let n = 300;
        let mut accs = Vec::new();
        for seed in 0..20 {
            let x = random(n, 8, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i % 10 < 6)).collect();
            labels.shuffle(&mut rng);
            let s = ProbeSettings { split_seed: seed, ..Default::default() };
            accs.push(linear_probe(&x, &labels, &s).unwrap().overall_accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let prior: f64 = 0.6;
        let sigma = (prior * (1.0 - prior) / 60.0).sqrt() / (accs.len() as f64).sqrt();
        assert!((mean - prior).abs() < 3.0 * sigma + 0.02, "mean {mean}");
    }

    #[test]
    fn infinite_ridge_predicts_one_class() {
        let (x, labels) = blobs(20, 0.5, 2);
        let labels: Vec<usize> = labels.iter().enumerate().map(|(i, &c)| if i < 10 { 0 } else { c }).collect();
        let s = ProbeSettings { ridge_lambda: 1e12, ..Default::default() };
        let (train, test) = stratified_split(&labels, s.test_fraction, s.split_seed);
        let tl: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let clf = RidgeClassifier::fit(&x.select_rows(&train).unwrap(), &tl, s.ridge_lambda).unwrap();
        let p = clf.predict(&x.select_rows(&test).unwrap());
        assert!(p.iter().all(|&c| c == p[0]));
        let freq = |c| tl.iter().filter(|&&l| l == c).count();
        assert_eq!(freq(p[0]), (0..3).map(freq).max().unwrap());
    }

    #[test]
    fn rotation_does_not_change_probe() {
        let (x, labels) = blobs(30, 2.0, 3);
        let angle: f64 = 0.7;
        let (c, s) = (angle.cos(), angle.sin());
        let rot = Matrix::from_rows(&[[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let a = linear_probe(&x, &labels, &ProbeSettings::default()).unwrap();
        let b = linear_probe(&x.matmul(&rot).unwrap(), &labels, &ProbeSettings::default()).unwrap();
        assert!((a.overall_accuracy - b.overall_accuracy).abs() < 1e-9);
        assert_eq!(a.per_class_accuracy(), b.per_class_accuracy());
    }

    #[test]
    fn singleton_classes_are_dropped() {
        let (x, mut labels) = blobs(10, 0.1, 4);
        labels[0] = 9;
        let r = linear_probe(&x, &labels, &ProbeSettings::default()).unwrap();
        assert_eq!(r.dropped, vec![9]);
        assert_eq!(r.warnings.len(), 1);
        assert!(!r.per_class.contains_key(&9));
        let one_class = vec![0; 30];
        assert!(linear_probe(&x, &one_class, &ProbeSettings::default()).is_err());
    }

    #[test]
    fn split_examples() {
        let (minor, major) = minority_majority_split(&crate::synth::nuscenes_like_proportions(), 0.05);
        assert_eq!(minor.len(), 11);
        assert_eq!(major.len(), 5);
        let (minor, major) = minority_majority_split(&[0.25; 4], 0.05);
        assert!(minor.is_empty());
        assert_eq!(major, vec![0, 1, 2, 3]);
        let (minor, major) = minority_majority_split(&[0.05, 0.95], 0.05);
        assert_eq!((minor, major), (vec![0], vec![1]));
    }

    #[test]
    fn groups_use_present_classes() {
        let (x, labels) = blobs(20, 0.0, 5);
        let mut r = linear_probe(&x, &labels, &ProbeSettings::default()).unwrap();
        r.assign_groups(&[0.02, 0.49, 0.49, 0.0], 0.05);
        assert_eq!(r.minority, vec![0]);
        assert_eq!(r.majority, vec![1, 2]);
        assert_eq!(r.minority_mean, Some(1.0));
        let json = r.to_json(Some(&["a", "b", "c"]));
        assert!(json.contains("\"minority_mean\": 1.0"));
        assert!(json.contains("\"name\": \"b\""));
    }

    #[test]
    fn uniformity_examples() {
        let same = Matrix::filled(5, 3, 0.4);
        assert!(uniformity(&same).unwrap().abs() < 1e-15);
        let anti = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert!((uniformity(&anti).unwrap() + 8.0).abs() < 1e-12);
        assert!(uniformity(&Matrix::zeros(1, 3)).is_err());

        let x = random(50, 8, 6);
        let y = l2_normalize_rows(&x, 1e-12);
        let mut acc = 0.0;
        for i in 0..50 {
            for j in 0..50 {
                if i != j {
                    let d2: f64 = (0..8).map(|d| (y.get(i, d) - y.get(j, d)).powi(2)).sum();
                    acc += (-2.0 * d2).exp();
                }
            }
        }
        let oracle = (acc / (50.0 * 49.0)).ln();
        assert!((uniformity(&x).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn uniformity_falls_as_points_separate() {
        let mut prev = 0.0;
        for step in 1..=10 {
            let a = 0.3 * step as f64;
            let x = Matrix::from_rows(&[[1.0, 0.0], [a.cos(), a.sin()]]).unwrap();
            let u = uniformity(&x).unwrap();
            assert!(u < prev);
            prev = u;
        }
    }

    #[test]
    fn tolerance_examples() {
        let same = Matrix::filled(4, 3, 1.0);
        assert!((tolerance(&same, &[0; 4]).unwrap() - 1.0).abs() < 1e-15);
        let two = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 3.0]]).unwrap();
        assert!((tolerance(&two, &[0, 0, 1, 1]).unwrap() - 1.0).abs() < 1e-15);
        assert!(tolerance(&two, &[0, 1, 2, 3]).is_err());

        let x = random(40, 5, 7);
        let labels: Vec<usize> = (0..40).map(|i| (i * 7) % 4).collect();
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..40 {
            for j in 0..40 {
                if i != j && labels[i] == labels[j] {
                    let (a, b) = (x.row(i), x.row(j));
                    let ab: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                    s += ab / (na * nb);
                    n += 1.0;
                }
            }
        }
        assert!((tolerance(&x, &labels).unwrap() - s / n).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn tolerance_is_a_cosine(seed in 0u64..500, m in 2usize..20) {
            let x = random(m, 4, seed);
            let labels = vec![0; m];
            let t = tolerance(&x, &labels).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&t));
        }

        #[test]
        fn split_partitions_classes(p in proptest::collection::vec(0.0f64..1.0, 1..12), t in 0.0f64..1.0) {
            let (a, b) = minority_majority_split(&p, t);
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..p.len()).collect::<Vec<_>>());
            prop_assert!(b.iter().all(|&c| p[c] > t));
        }
    }
}
