//! Scalar objectives on plain probability vectors.

use super::tape::{row_entropy, PROB_FLOOR};
use crate::error::{Error, Result};

/// Tolerance on `sum(p) == 1` accepted by [`entropy`].
pub const SUM_TOLERANCE: f64 = 1e-6;

#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn validate(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    if let Some(q) = p.iter().find(|q| !(**q >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("entry {q} is negative")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("entries sum to {s}")));
    }
    Ok(())
}

/// `H(p) = -sum p log p` with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    validate(p)?;
    Ok(row_entropy(p))
}

/// `-log p[target]`, with `p[target]` clamped below at `1e-12`.
pub fn cross_entropy(target: usize, p: &[f64]) -> Result<f64> {
    let q = *p.get(target).ok_or(Error::IndexOutOfRange {
        index: target,
        size: p.len(),
    })?;
    Ok(-q.max(PROB_FLOOR).ln())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}
