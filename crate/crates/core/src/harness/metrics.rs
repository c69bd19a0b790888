//! Token error rate and per-cell result rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levenshtein distance over token sequences (unit substitution, insertion
/// and deletion costs).
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance divided by the reference length.
pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("wer needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Accumulates errors over a corpus; the rate is total edits over total
/// reference tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorCounter {
    pub edits: usize,
    pub reference_tokens: usize,
    pub sequences: usize,
    pub exact: usize,
}

impl ErrorCounter {
    pub fn add(&mut self, reference: &[usize], hypothesis: &[usize]) {
        let e = edit_distance(reference, hypothesis);
        self.edits += e;
        self.reference_tokens += reference.len();
        self.sequences += 1;
        self.exact += usize::from(e == 0);
    }

    /// Token error rate in percent.
    pub fn token_error_rate(&self) -> f64 {
        if self.reference_tokens == 0 {
            0.0
        } else {
            100.0 * self.edits as f64 / self.reference_tokens as f64
        }
    }

    /// Exact-match rate in percent.
    pub fn sequence_accuracy(&self) -> f64 {
        if self.sequences == 0 {
            0.0
        } else {
            100.0 * self.exact as f64 / self.sequences as f64
        }
    }
}

/// Token error rate in percent of a corpus of `(reference, hypothesis)` pairs.
pub fn token_error_rate<'a, I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (&'a [usize], &'a [usize])>,
{
    let mut c = ErrorCounter::default();
    for (r, h) in pairs {
        c.add(r, h);
    }
    c.token_error_rate()
}

/// One evaluated grid cell. Adaptation fields are empty for the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub corruption: String,
    pub seed: u64,
    pub objective: String,
    pub selection: String,
    pub tau: Option<f64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub n_utterances: usize,
    pub token_error_rate: f64,
    pub sequence_accuracy: f64,
    pub mean_entropy: f64,
    pub skipped_steps: usize,
    pub numeric_failures: usize,
    pub error: Option<String>,
}

impl MetricsRow {
    /// Condition label without the seed, e.g. `ENTROPY tau=0 K=3`.
    pub fn condition(&self) -> String {
        match (self.tau, self.steps) {
            (Some(t), Some(k)) => format!("{} tau={t} K={k}", self.objective),
            _ => self.objective.clone(),
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.objective == "NONE"
    }
}
