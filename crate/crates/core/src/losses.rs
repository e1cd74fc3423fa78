//! Contrastive losses between superpoint embeddings `Q` and superpixel
//! embeddings `K`, with gradients taken with respect to the *unnormalized*
//! rows of both.
//!
//! All four variants share one per-anchor term
//!
//! ```text
//! ℓ_i = −log  exp(s_ii/τ) / ( Σ_{j≠i, kept} exp(c_ij s_ij/τ) + exp(s_ii/τ) )
//! ```
//!
//! where `s_ij` is the cosine between `q_i` and `k_j`, `c_ij = 1 − α_ij` for
//! the similarity-weighted variant (1 otherwise) and "kept" is the KNN mask.
//! The total is `Σ_i a_i ℓ_i` with `a_i = 1/M`, or `w_i / w` when anchors are
//! balanced.
//!
//! Rows are processed one anchor at a time so the only M×M buffer is the
//! softmax table returned in [`LossResult::probs`].

use crate::error::{Error, Result};
use crate::matcore::{
    axpy, compensated_sum, dot, normalize_rows_backward, normalize_rows_with_norms, BinaryMatrix,
    Matrix,
};

/// Tolerance on α above 1 (cosines of identical unit vectors round to 1 ± ulp).
const ALPHA_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub normalization_eps: f64,
}

impl LossConfig {
    /// Superpixel-level default.
    pub const SUPERPIXEL_TEMPERATURE: f64 = 0.07;
    /// Point-level default.
    pub const POINT_TEMPERATURE: f64 = 0.04;

    pub fn with_temperature(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: Self::SUPERPIXEL_TEMPERATURE,
            normalization_eps: 1e-12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Slidr,
    Alpha,
    Knn,
    St,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Slidr, Variant::Alpha, Variant::Knn, Variant::St];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Slidr => "slidr",
            Variant::Alpha => "alpha",
            Variant::Knn => "knn",
            Variant::St => "st",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slidr" => Ok(Variant::Slidr),
            "alpha" => Ok(Variant::Alpha),
            "knn" => Ok(Variant::Knn),
            "st" => Ok(Variant::St),
            other => Err(Error::param(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A loss variant together with the batch-level data it needs.
#[derive(Clone, Debug)]
pub enum LossKind {
    Slidr,
    Alpha(Matrix),
    Knn(BinaryMatrix),
    St {
        mask: BinaryMatrix,
        weights: Vec<f64>,
        weight_sum: f64,
    },
}

impl LossKind {
    pub fn variant(&self) -> Variant {
        match self {
            LossKind::Slidr => Variant::Slidr,
            LossKind::Alpha(_) => Variant::Alpha,
            LossKind::Knn(_) => Variant::Knn,
            LossKind::St { .. } => Variant::St,
        }
    }

    fn terms(&self) -> Terms<'_> {
        match self {
            LossKind::Slidr => Terms::default(),
            LossKind::Alpha(a) => Terms {
                alpha: Some(a),
                ..Terms::default()
            },
            LossKind::Knn(m) => Terms {
                mask: Some(m),
                ..Terms::default()
            },
            LossKind::St {
                mask,
                weights,
                weight_sum,
            } => Terms {
                mask: Some(mask),
                weights: Some((weights, *weight_sum)),
                ..Terms::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossResult {
    pub value: f64,
    /// ∂value/∂Q (unnormalized rows).
    pub grad_q: Matrix,
    /// ∂value/∂K (unnormalized rows).
    pub grad_k: Matrix,
    /// Row `i` holds the softmax over anchor `i`'s kept terms; the positive
    /// sits on the diagonal and masked entries are exactly 0.
    pub probs: Matrix,
    /// Unweighted `ℓ_i`.
    pub per_anchor: Vec<f64>,
    /// `a_i` (1/M or w_i/w).
    pub anchor_weights: Vec<f64>,
}

#[derive(Clone, Copy, Default)]
struct Terms<'a> {
    alpha: Option<&'a Matrix>,
    mask: Option<&'a BinaryMatrix>,
    weights: Option<(&'a [f64], f64)>,
}

impl Terms<'_> {
    fn validate(&self, m: usize) -> Result<()> {
        if m < 2 {
            return Err(Error::TooFewAnchors(m));
        }
        if let Some(a) = self.alpha {
            if a.shape() != (m, m) {
                return Err(Error::dim(format!("alpha is {:?}, expected {m}x{m}", a.shape())));
            }
            for i in 0..m {
                for (j, &v) in a.row(i).iter().enumerate() {
                    if i != j && (v > 1.0 + ALPHA_SLACK || v.is_nan()) {
                        return Err(Error::AlphaOutOfRange {
                            row: i,
                            col: j,
                            value: v,
                        });
                    }
                }
            }
        }
        if let Some(mask) = self.mask {
            if (mask.rows(), mask.cols()) != (m, m) {
                return Err(Error::dim(format!(
                    "mask is {}x{}, expected {m}x{m}",
                    mask.rows(),
                    mask.cols()
                )));
            }
        }
        if let Some((w, sum)) = self.weights {
            if w.len() != m {
                return Err(Error::dim(format!("{} weights for {m} anchors", w.len())));
            }
            if let Some(bad) = w.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::param(format!("anchor weight {bad} is negative")));
            }
            if !(sum > 0.0) {
                return Err(Error::NonPositiveWeightSum(sum));
            }
        }
        Ok(())
    }

    fn anchor_weights(&self, m: usize) -> Vec<f64> {
        match self.weights {
            Some((w, sum)) => w.iter().map(|v| v / sum).collect(),
            None => vec![1.0 / m as f64; m],
        }
    }

    #[inline]
    fn kept(&self, i: usize, j: usize) -> bool {
        i != j && self.mask.is_none_or(|m| m.get(i, j))
    }

    #[inline]
    fn factor(&self, i: usize, j: usize) -> f64 {
        self.alpha.map_or(1.0, |a| 1.0 - a.get(i, j))
    }

    /// Turns a row of similarities (in place) into the softmax row and
    /// returns `ℓ_i`.
    fn anchor_term(&self, i: usize, row: &mut [f64], inv_tau: f64) -> Result<f64> {
        let pos = row[i] * inv_tau;
        let mut max = pos;
        let mut survivors = 0usize;
        for (j, v) in row.iter_mut().enumerate() {
            if j == i {
                *v = pos;
            } else if self.kept(i, j) {
                *v *= self.factor(i, j) * inv_tau;
                max = max.max(*v);
                survivors += 1;
            } else {
                *v = f64::NEG_INFINITY;
            }
        }
        if survivors == 0 {
            return Err(Error::NoNegatives(i));
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let lse = max + sum.ln();
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
        Ok(lse - pos)
    }

    /// `∂ℓ_i/∂s_ij` from a softmax row.
    #[inline]
    fn d_term(&self, i: usize, j: usize, p: f64, inv_tau: f64) -> f64 {
        if i == j {
            (p - 1.0) * inv_tau
        } else if p == 0.0 {
            0.0
        } else {
            self.factor(i, j) * p * inv_tau
        }
    }
}

fn check_inputs(q: &Matrix, k: &Matrix, cfg: &LossConfig) -> Result<()> {
    if q.shape() != k.shape() {
        return Err(Error::dim(format!(
            "Q is {:?} but K is {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if q.cols() == 0 {
        return Err(Error::dim("embeddings need at least one column"));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::param(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    Ok(())
}

fn run(q: &Matrix, k: &Matrix, terms: Terms<'_>, cfg: &LossConfig) -> Result<LossResult> {
    check_inputs(q, k, cfg)?;
    let m = q.rows();
    terms.validate(m)?;
    let inv_tau = 1.0 / cfg.temperature;
    let eps = cfg.normalization_eps;
    let (qn, qnorm) = normalize_rows_with_norms(q, eps);
    let (kn, knorm) = normalize_rows_with_norms(k, eps);

    let mut probs = Matrix::zeros(m, m);
    let mut per_anchor = Vec::with_capacity(m);
    for i in 0..m {
        let qi = qn.row(i);
        let row = probs.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = dot(qi, kn.row(j));
        }
        per_anchor.push(terms.anchor_term(i, row, inv_tau)?);
    }
    let anchor_weights = terms.anchor_weights(m);
    let value = compensated_sum(per_anchor.iter().zip(&anchor_weights).map(|(l, a)| l * a));

    let e = q.cols();
    let mut dqn = Matrix::zeros(m, e);
    let mut dkn = Matrix::zeros(m, e);
    for i in 0..m {
        let a = anchor_weights[i];
        if a == 0.0 {
            continue;
        }
        let qi = qn.row(i).to_vec();
        for (j, &p) in probs.row(i).iter().enumerate() {
            let g = a * terms.d_term(i, j, p, inv_tau);
            if g == 0.0 {
                continue;
            }
            axpy(g, kn.row(j), dqn.row_mut(i));
            axpy(g, &qi, dkn.row_mut(j));
        }
    }
    let grad_q = normalize_rows_backward(&qn, &qnorm, &dqn, eps);
    let grad_k = normalize_rows_backward(&kn, &knorm, &dkn, eps);
    Ok(LossResult {
        value,
        grad_q,
        grad_k,
        probs,
        per_anchor,
        anchor_weights,
    })
}

/// Plain InfoNCE over superpoint/superpixel pairs.
pub fn loss_slidr(q: &Matrix, k: &Matrix, cfg: &LossConfig) -> Result<LossResult> {
    run(q, k, Terms::default(), cfg)
}

/// Negatives scaled by `1 − α_ij` inside the exponent.
pub fn loss_alpha(q: &Matrix, k: &Matrix, alpha: &Matrix, cfg: &LossConfig) -> Result<LossResult> {
    run(
        q,
        k,
        Terms {
            alpha: Some(alpha),
            ..Terms::default()
        },
        cfg,
    )
}

/// Negatives with `mask[i][j] == false` are dropped from the denominator.
pub fn loss_knn(
    q: &Matrix,
    k: &Matrix,
    mask: &BinaryMatrix,
    cfg: &LossConfig,
) -> Result<LossResult> {
    run(
        q,
        k,
        Terms {
            mask: Some(mask),
            ..Terms::default()
        },
        cfg,
    )
}

/// KNN-masked loss with anchors weighted by `w_i / w`.
pub fn loss_st(
    q: &Matrix,
    k: &Matrix,
    mask: &BinaryMatrix,
    weights: &[f64],
    weight_sum: f64,
    cfg: &LossConfig,
) -> Result<LossResult> {
    run(
        q,
        k,
        Terms {
            mask: Some(mask),
            weights: Some((weights, weight_sum)),
            ..Terms::default()
        },
        cfg,
    )
}

/// Dispatches on a [`LossKind`].
pub fn compute(q: &Matrix, k: &Matrix, kind: &LossKind, cfg: &LossConfig) -> Result<LossResult> {
    run(q, k, kind.terms(), cfg)
}

/// Loss value only, using O(M) scratch memory.
pub fn loss_value(q: &Matrix, k: &Matrix, kind: &LossKind, cfg: &LossConfig) -> Result<f64> {
    check_inputs(q, k, cfg)?;
    let terms = kind.terms();
    let m = q.rows();
    terms.validate(m)?;
    let inv_tau = 1.0 / cfg.temperature;
    let qn = normalize_rows_with_norms(q, cfg.normalization_eps).0;
    let kn = normalize_rows_with_norms(k, cfg.normalization_eps).0;
    let weights = terms.anchor_weights(m);
    let mut row = vec![0.0; m];
    let mut terms_out = Vec::with_capacity(m);
    for i in 0..m {
        for (j, v) in row.iter_mut().enumerate() {
            *v = dot(qn.row(i), kn.row(j));
        }
        terms_out.push(weights[i] * terms.anchor_term(i, &mut row, inv_tau)?);
    }
    Ok(compensated_sum(terms_out))
}

/// Loss evaluated directly on a similarity matrix `s` (no normalization).
#[derive(Clone, Debug)]
pub struct SimilarityLoss {
    pub value: f64,
    pub per_anchor: Vec<f64>,
    pub probs: Matrix,
    /// ∂value/∂s.
    pub grad: Matrix,
}

pub fn loss_from_similarities(s: &Matrix, kind: &LossKind, temperature: f64) -> Result<SimilarityLoss> {
    if s.rows() != s.cols() {
        return Err(Error::dim(format!("similarity matrix is {:?}", s.shape())));
    }
    if !(temperature > 0.0) {
        return Err(Error::param("temperature must be positive"));
    }
    let terms = kind.terms();
    let m = s.rows();
    terms.validate(m)?;
    let inv_tau = 1.0 / temperature;
    let mut probs = s.clone();
    let mut per_anchor = Vec::with_capacity(m);
    for i in 0..m {
        per_anchor.push(terms.anchor_term(i, probs.row_mut(i), inv_tau)?);
    }
    let weights = terms.anchor_weights(m);
    let value = compensated_sum(per_anchor.iter().zip(&weights).map(|(l, a)| l * a));
    let grad = Matrix::from_fn(m, m, |i, j| {
        weights[i] * terms.d_term(i, j, probs.get(i, j), inv_tau)
    });
    Ok(SimilarityLoss {
        value,
        per_anchor,
        probs,
        grad,
    })
}

/// Largest `|analytic − numeric| / max(1, |numeric|)` over every entry of
/// `Q` and `K`, using central differences with step `epsilon`.
pub fn finite_difference_check(
    q: &Matrix,
    k: &Matrix,
    kind: &LossKind,
    cfg: &LossConfig,
    epsilon: f64,
) -> Result<f64> {
    let analytic = compute(q, k, kind, cfg)?;
    max_gradient_error(q, k, kind, cfg, epsilon, &analytic.grad_q, &analytic.grad_k)
}

/// Same as [`finite_difference_check`] against caller-supplied gradients.
pub fn max_gradient_error(
    q: &Matrix,
    k: &Matrix,
    kind: &LossKind,
    cfg: &LossConfig,
    epsilon: f64,
    grad_q: &Matrix,
    grad_k: &Matrix,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::param(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let mut worst = 0.0f64;
    for (which, analytic) in [(0, grad_q), (1, grad_k)] {
        let mut qq = q.clone();
        let mut kk = k.clone();
        for idx in 0..analytic.as_slice().len() {
            let target = if which == 0 { &mut qq } else { &mut kk };
            let orig = target.as_slice()[idx];
            target.as_mut_slice()[idx] = orig + epsilon;
            let plus = loss_value(&qq, &kk, kind, cfg)?;
            let target = if which == 0 { &mut qq } else { &mut kk };
            target.as_mut_slice()[idx] = orig - epsilon;
            let minus = loss_value(&qq, &kk, kind, cfg)?;
            let target = if which == 0 { &mut qq } else { &mut kk };
            target.as_mut_slice()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (analytic.as_slice()[idx] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
