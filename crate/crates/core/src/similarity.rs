//! Superpixel-to-superpixel similarity and everything derived from it: the
//! KNN false-negative mask, thresholded similarity weights and the
//! class-agnostic anchor weights.

use crate::error::{Error, Result};
use crate::matcore::{compensated_sum, dot, gram, l2_normalize_rows, BinaryMatrix, Matrix};

const NORMALIZE_EPS: f64 = 1e-12;

/// Cosine similarity between every pair of feature rows.
pub fn superpixel_similarity(features: &Matrix) -> Result<Matrix> {
    if features.rows() < 2 {
        return Err(Error::TooFewAnchors(features.rows()));
    }
    let f = l2_normalize_rows(features, NORMALIZE_EPS);
    gram(&f, &f)
}

/// Maps cosines from `[-1, 1]` onto `[0, 1]`.
pub fn rescale_unit_interval(alpha: &Matrix) -> Matrix {
    let mut out = alpha.clone();
    out.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = (*v + 1.0) * 0.5);
    out
}

/// `floor(percent / 100 * m)`, clamped so at least one negative survives.
pub fn percent_to_k(percent: f64, m: usize) -> usize {
    let raw = (percent / 100.0 * m as f64).floor();
    let hi = m.saturating_sub(2) as f64;
    raw.clamp(0.0, hi) as usize
}

/// Negative mask that drops, for each anchor, the `k` most similar other
/// samples. Ties at the cut are resolved by excluding the smaller column
/// index first. The diagonal is stored as `false`.
pub fn knn_mask(alpha: &Matrix, k: usize) -> Result<BinaryMatrix> {
    let m = alpha.rows();
    if alpha.cols() != m {
        return Err(Error::dim(format!("alpha is {}x{}", m, alpha.cols())));
    }
    if m < 2 || k > m - 2 {
        return Err(Error::KTooLarge { k, m });
    }
    let mut mask = BinaryMatrix::off_diagonal(m);
    if k == 0 {
        return Ok(mask);
    }
    let mut order: Vec<usize> = Vec::with_capacity(m - 1);
    for i in 0..m {
        let row = alpha.row(i);
        order.clear();
        order.extend((0..m).filter(|&j| j != i));
        // descending similarity, ascending column on ties
        let by_rank = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        order.select_nth_unstable_by(k - 1, by_rank);
        for &j in &order[..k] {
            mask.set(i, j, false);
        }
    }
    Ok(mask)
}

/// Zeroes off-diagonal entries strictly below `alpha_min`.
pub fn threshold_alpha(alpha: &Matrix, alpha_min: f64) -> Matrix {
    let mut out = alpha.clone();
    let m = out.cols();
    for (idx, v) in out.as_mut_slice().iter_mut().enumerate() {
        if idx / m != idx % m && *v < alpha_min {
            *v = 0.0;
        }
    }
    out
}

/// How votes are min-max normalized before `w = 1 - v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VoteNormalization {
    /// `(v - v_min) / v_max`
    #[default]
    Paper,
    /// `(v - v_min) / (v_max - v_min)`
    Conventional,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalanceWeights {
    /// Normalized votes.
    pub votes: Vec<f64>,
    pub weights: Vec<f64>,
    pub weight_sum: f64,
}

/// Anchor weights inversely related to how many samples look like the
/// anchor. Votes are row sums of `alpha` (diagonal included).
pub fn balance_weights(alpha: &Matrix, normalization: VoteNormalization) -> Result<BalanceWeights> {
    let m = alpha.rows();
    if alpha.cols() != m {
        return Err(Error::dim(format!("alpha is {}x{}", m, alpha.cols())));
    }
    if m < 2 {
        return Err(Error::TooFewAnchors(m));
    }
    let raw: Vec<f64> = alpha
        .iter_rows()
        .map(|r| compensated_sum(r.iter().copied()))
        .collect();
    balance_from_votes(&raw, normalization)
}

pub(crate) fn balance_from_votes(
    raw: &[f64],
    normalization: VoteNormalization,
) -> Result<BalanceWeights> {
    let m = raw.len();
    let v_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let v_max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v_max == v_min {
        return Ok(BalanceWeights {
            votes: vec![0.0; m],
            weights: vec![1.0 / m as f64; m],
            weight_sum: 1.0,
        });
    }
    let denom = match normalization {
        VoteNormalization::Paper => {
            if v_min < 0.0 {
                return Err(Error::NegativeVotes);
            }
            v_max
        }
        VoteNormalization::Conventional => v_max - v_min,
    };
    let votes: Vec<f64> = raw.iter().map(|v| (v - v_min) / denom).collect();
    let weights: Vec<f64> = votes.iter().map(|v| 1.0 - v).collect();
    let weight_sum = compensated_sum(weights.iter().copied());
    Ok(BalanceWeights {
        votes,
        weights,
        weight_sum,
    })
}

/// Settings that turn frozen features into a [`SimilarityBundle`].
#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySettings {
    /// Share of the batch removed as nearest neighbours; `None` keeps every
    /// negative.
    pub k_percent: Option<f64>,
    /// Threshold for the similarity-weighted loss.
    pub alpha_min: f64,
    /// Map α to `[0, 1]` before it is used as a loss weight or for masking.
    pub rescale_alpha: bool,
    /// Balancing on/off and which normalization.
    pub balance: Option<VoteNormalization>,
    /// Compute votes on `[0, 1]`-rescaled α.
    pub rescale_votes: bool,
}

impl Default for SimilaritySettings {
    fn default() -> Self {
        Self {
            k_percent: None,
            alpha_min: 0.0,
            rescale_alpha: false,
            balance: None,
            rescale_votes: true,
        }
    }
}

/// α, mask and weights for one batch.
#[derive(Clone, Debug)]
pub struct SimilarityBundle {
    pub alpha: Matrix,
    pub knn_mask: Option<BinaryMatrix>,
    pub balance: Option<BalanceWeights>,
}

impl SimilarityBundle {
    pub fn compute(features: &Matrix, settings: &SimilaritySettings) -> Result<Self> {
        let raw = superpixel_similarity(features)?;
        let alpha = if settings.rescale_alpha {
            rescale_unit_interval(&raw)
        } else {
            raw
        };
        let m = alpha.rows();
        let knn_mask = match settings.k_percent {
            Some(p) => Some(knn_mask(&alpha, percent_to_k(p, m))?),
            None => None,
        };
        let balance = match settings.balance {
            Some(norm) => {
                let votes_alpha = if settings.rescale_votes && !settings.rescale_alpha {
                    rescale_unit_interval(&alpha)
                } else {
                    alpha.clone()
                };
                Some(balance_weights(&votes_alpha, norm)?)
            }
            None => None,
        };
        Ok(Self {
            alpha,
            knn_mask,
            balance,
        })
    }
}

/// Row sums of the `[0,1]`-rescaled cosine similarity, computed without
/// materializing the M×M matrix.
pub fn streaming_votes(features: &Matrix, rescale: bool) -> Vec<f64> {
    let f = l2_normalize_rows(features, NORMALIZE_EPS);
    f.iter_rows()
        .map(|fi| {
            compensated_sum(f.iter_rows().map(|fj| {
                let a = dot(fi, fj);
                if rescale {
                    (a + 1.0) * 0.5
                } else {
                    a
                }
            }))
        })
        .collect()
}
