use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::slm::{StepDistribution, TrackedSequence};

/// Per-token keep flags: `mask[b][t]` is true iff `max_q p_{b,t}(q) >= tau`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidenceMask {
    mask: Vec<Vec<bool>>,
    kept_count: usize,
}

impl ConfidenceMask {
    pub fn mask(&self) -> &[Vec<bool>] {
        &self.mask
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    pub fn total(&self) -> usize {
        self.mask.iter().map(Vec::len).sum()
    }

    /// 1.0 / 0.0 weights in sample-major, step-minor order.
    pub fn weights(&self) -> Vec<f64> {
        self.mask
            .iter()
            .flatten()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect()
    }
}

pub fn confidence_mask(dists: &[Vec<StepDistribution>], tau: f64) -> ConfidenceMask {
    let mask: Vec<Vec<bool>> = dists
        .iter()
        .map(|seq| seq.iter().map(|d| d.confidence() >= tau).collect())
        .collect();
    let kept_count = mask.iter().flatten().filter(|&&m| m).count();
    ConfidenceMask { mask, kept_count }
}

fn stacked_logits(tape: &mut Tape, seqs: &[TrackedSequence]) -> Result<Var> {
    let parts: Vec<Var> = seqs.iter().map(|s| s.logits).collect();
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(&parts)
    }
}

fn masked_mean(tape: &mut Tape, per_token: Var, mask: &ConfidenceMask) -> Result<Var> {
    let total = tape.dot_const(per_token, &mask.weights())?;
    Ok(tape.div_scalar(total, mask.kept_count() as f64))
}

/// Mean entropy over kept tokens; `None` when nothing is kept.
pub fn entropy_objective(
    tape: &mut Tape,
    seqs: &[TrackedSequence],
    mask: &ConfidenceMask,
) -> Result<Option<Var>> {
    if mask.kept_count() == 0 || seqs.is_empty() {
        return Ok(None);
    }
    let logits = stacked_logits(tape, seqs)?;
    let h = tape.softmax_entropy(logits)?;
    masked_mean(tape, h, mask).map(Some)
}

/// Mean cross-entropy of kept tokens against their own argmax, which is
/// treated as a fixed target. `None` when nothing is kept.
pub fn pseudo_label_objective(
    tape: &mut Tape,
    seqs: &[TrackedSequence],
    mask: &ConfidenceMask,
) -> Result<Option<Var>> {
    if mask.kept_count() == 0 || seqs.is_empty() {
        return Ok(None);
    }
    let targets: Vec<usize> = seqs
        .iter()
        .flat_map(|s| s.distributions.iter().map(StepDistribution::argmax))
        .collect();
    let logits = stacked_logits(tape, seqs)?;
    let ce = tape.softmax_nll(logits, &targets)?;
    masked_mean(tape, ce, mask).map(Some)
}
