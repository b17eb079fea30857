//! Training objective: cross-entropy on logits plus alignment and uniformity
//! on unit features.
//!
//! The total is `ce + alpha * align + beta * uniform`. Alignment is the mean
//! squared distance over all unordered same-class pairs; uniformity is the log
//! of the mean of `exp(-2 * ||z_x - z_y||^2)` over all unordered pairs,
//! self-pairs excluded from both. These are the empirical estimators of the
//! population expectations, evaluated on whatever batch is passed in (the
//! trainer passes the slerp-extended batch).

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sphere::{pairwise_sq_dists, FeatureBatch};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Weights of the alignment and uniformity terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.beta.is_finite()) || self.alpha < 0.0 || self.beta < 0.0
        {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and nonnegative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub align: f64,
    pub uniform: f64,
    pub positive_pairs: usize,
    pub all_pairs: usize,
}

/// Mean negative log-softmax probability of the true class.
///
/// Log-sum-exp stabilized; always >= 0.
pub fn cross_entropy<F: Real>(logits: &Array2<F>, labels: &[u8]) -> Result<F> {
    if logits.nrows() != labels.len() || logits.ncols() != 2 {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x2 logits", labels.len()),
            got: format!("{}x{}", logits.nrows(), logits.ncols()),
        });
    }
    let mut total = F::zero();
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let m = row[0].max(row[1]);
        let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
        total += lse - row[usize::from(label)];
    }
    Ok(total / F::from_f64_c(labels.len() as f64))
}

/// Number of unordered same-class pairs in a label vector.
pub fn positive_pair_count(labels: &[u8]) -> usize {
    let ones = labels.iter().filter(|l| **l == 1).count();
    let zeros = labels.len() - ones;
    ones * (ones.saturating_sub(1)) / 2 + zeros * (zeros.saturating_sub(1)) / 2
}

/// Mean squared distance over all unordered same-class pairs.
pub fn alignment_loss<F: Real>(batch: &FeatureBatch<F>) -> Result<F> {
    let positives = positive_pair_count(batch.labels());
    if positives == 0 {
        return Err(Error::NoPositivePairs);
    }
    let d2 = pairwise_sq_dists(batch);
    let labels = batch.labels();
    let mut total = F::zero();
    for x in 0..labels.len() {
        for y in (x + 1)..labels.len() {
            if labels[x] == labels[y] {
                total += d2[(x, y)];
            }
        }
    }
    Ok(total / F::from_f64_c(positives as f64))
}

/// Log of the mean of `exp(-2 * d^2)` over all unordered pairs.
pub fn uniformity_loss<F: Real>(batch: &FeatureBatch<F>) -> Result<F> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::InvalidConfig(
            "uniformity needs a batch of at least 2".into(),
        ));
    }
    let d2 = pairwise_sq_dists(batch);
    let two = F::from_f64_c(2.0);
    let mut total = F::zero();
    for x in 0..n {
        for y in (x + 1)..n {
            total += (-two * d2[(x, y)]).exp();
        }
    }
    let pairs = F::from_f64_c((n * (n - 1) / 2) as f64);
    Ok((total / pairs).ln())
}

/// Weighted combination of the three terms with its per-term breakdown.
///
/// When `alpha == 0` a batch without positive pairs contributes `align = 0`
/// instead of erroring; with `alpha > 0` the [`Error::NoPositivePairs`]
/// condition propagates.
pub fn combined_loss<F: Real>(
    logits: &Array2<F>,
    batch: &FeatureBatch<F>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let ce = cross_entropy(logits, batch.labels())?.to_f64_c();
    let align = match alignment_loss(batch) {
        Ok(v) => v.to_f64_c(),
        Err(Error::NoPositivePairs) if weights.alpha == 0.0 => 0.0,
        Err(e) => return Err(e),
    };
    let uniform = uniformity_loss(batch)?.to_f64_c();
    let n = batch.len();
    Ok(LossBreakdown {
        total: ce + weights.alpha * align + weights.beta * uniform,
        cross_entropy: ce,
        align,
        uniform,
        positive_pairs: positive_pair_count(batch.labels()),
        all_pairs: n * (n - 1) / 2,
    })
}
