//! Episodic test-time adaptation.
//!
//! For every batch the engine decodes, scores the decoded positions with an
//! unsupervised objective restricted to confident tokens, takes `K` plain
//! gradient steps on the adaptable parameters, predicts with the adapted
//! model and finally resets the adaptable parameters to their values from
//! before the batch.

mod objective;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::slm::{GenerationResult, Model, StepDistribution};

pub use objective::{confidence_mask, entropy_objective, pseudo_label_objective, ConfidenceMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Objective {
    /// Mean Shannon entropy of the kept step distributions.
    Entropy,
    /// Mean cross-entropy against the step-wise argmax tokens.
    PseudoLabel,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "ENTROPY" | "ENT" => Ok(Self::Entropy),
            "PSEUDO_LABEL" | "PL" => Ok(Self::PseudoLabel),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Entropy => "ENTROPY",
            Self::PseudoLabel => "PSEUDO_LABEL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub objective: Objective,
    /// Confidence threshold; tokens with max-probability `>= tau` are kept.
    pub tau: f64,
    /// Gradient steps per batch.
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Decode again before every step instead of reusing the first hypotheses.
    #[serde(default = "default_redecode")]
    pub redecode_each_step: bool,
}

fn default_redecode() -> bool {
    true
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Entropy,
            tau: 0.0,
            steps: 1,
            lr: 1e-4,
            batch_size: 5,
            redecode_each_step: true,
        }
    }
}

impl AdaptationConfig {
    /// Dynamic pseudo-labeling: pseudo-label objective with masking disabled.
    pub fn dynamic_pseudo_labeling(steps: usize, lr: f64, batch_size: usize) -> Self {
        Self {
            objective: Objective::PseudoLabel,
            tau: 0.0,
            steps,
            lr,
            batch_size,
            redecode_each_step: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        // lr = 0 is accepted as an explicit no-op
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Label like `ENTROPY/tau=0.8/K=3`.
    pub fn label(&self) -> String {
        format!("{}/tau={}/K={}", self.objective, self.tau, self.steps)
    }
}

/// One unlabeled test input: audio features and the text prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TestInput {
    pub features: Tensor,
    pub prompt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub objective: Objective,
    pub tau: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Loss before each step's update; `None` when the step was skipped.
    pub losses: Vec<Option<f64>>,
    pub kept_counts: Vec<usize>,
    /// True if at least one step had no confident token and was skipped.
    pub skipped: bool,
    /// Number of steps that changed the parameters.
    pub updates: usize,
    pub numeric_failure: bool,
    #[serde(skip)]
    pub predictions: Vec<GenerationResult>,
    pub wall_time_s: f64,
}

/// Progress notification delivered after each adaptation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvent {
    pub step: usize,
    pub loss: Option<f64>,
    pub kept_count: usize,
    pub updated: bool,
}

fn decode_batch(model: &Model, batch: &[TestInput]) -> Result<Vec<GenerationResult>> {
    let max_len = model.config().max_len;
    batch
        .iter()
        .enumerate()
        .map(|(b, item)| {
            let mut g = model.decode_greedy(&item.features, &item.prompt, max_len)?;
            g.set_sample(b);
            Ok(g)
        })
        .collect()
}

/// Greedy predictions of the model as it stands, without adaptation.
pub fn predict_batch(model: &Model, batch: &[TestInput]) -> Result<Vec<GenerationResult>> {
    decode_batch(model, batch)
}

/// Runs one episode; see [`adapt_episode_observed`].
pub fn adapt_episode(
    model: &mut Model,
    batch: &[TestInput],
    config: &AdaptationConfig,
) -> Result<EpisodeReport> {
    adapt_episode_observed(model, batch, config, |_, _| {})
}

/// Runs one adaptation episode on `batch` and resets the model afterwards.
///
/// `observer` sees the model after every step, before the reset. The
/// returned predictions come from the adapted parameters.
pub fn adapt_episode_observed<F>(
    model: &mut Model,
    batch: &[TestInput],
    config: &AdaptationConfig,
    mut observer: F,
) -> Result<EpisodeReport>
where
    F: FnMut(StepEvent, &Model),
{
    config.validate()?;
    if batch.is_empty() || batch.len() > config.batch_size {
        return Err(Error::Contract(format!(
            "batch of {} samples for batch_size {}",
            batch.len(),
            config.batch_size
        )));
    }
    if model.params().selection().is_none() {
        return Err(Error::Contract(
            "no adaptable parameter subset has been selected".into(),
        ));
    }

    let start = Instant::now();
    let initial = model.snapshot();
    let mut report = EpisodeReport {
        objective: config.objective,
        tau: config.tau,
        steps: config.steps,
        lr: config.lr,
        batch_size: config.batch_size,
        losses: Vec::with_capacity(config.steps),
        kept_counts: Vec::with_capacity(config.steps),
        skipped: false,
        updates: 0,
        numeric_failure: false,
        predictions: Vec::new(),
        wall_time_s: 0.0,
    };

    let outcome = run_steps(model, batch, config, &mut report, &mut observer).and_then(|()| {
        if report.numeric_failure {
            model.restore(&initial)?;
        }
        decode_batch(model, batch)
    });
    // reset regardless of how the steps ended
    model.restore(&initial)?;
    model.params_mut().zero_grad();
    report.predictions = outcome?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn run_steps<F>(
    model: &mut Model,
    batch: &[TestInput],
    config: &AdaptationConfig,
    report: &mut EpisodeReport,
    observer: &mut F,
) -> Result<()>
where
    F: FnMut(StepEvent, &Model),
{
    let mut hypotheses: Option<Vec<Vec<usize>>> = None;
    for k in 0..config.steps {
        if config.redecode_each_step || hypotheses.is_none() {
            hypotheses = Some(
                decode_batch(model, batch)?
                    .into_iter()
                    .map(|g| g.tokens)
                    .collect(),
            );
        }
        let hyps = hypotheses.as_ref().expect("decoded above");

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let mut seqs = Vec::with_capacity(batch.len());
        for (b, (item, y)) in batch.iter().zip(hyps).enumerate() {
            let mut s = model.teacher_forced_distributions(
                &mut tape,
                &binding,
                &item.features,
                &item.prompt,
                y,
            )?;
            for d in &mut s.distributions {
                d.sample = b;
            }
            seqs.push(s);
        }
        let dists: Vec<Vec<StepDistribution>> =
            seqs.iter().map(|s| s.distributions.clone()).collect();
        let mask = confidence_mask(&dists, config.tau);
        report.kept_counts.push(mask.kept_count());

        let loss = match config.objective {
            Objective::Entropy => entropy_objective(&mut tape, &seqs, &mask)?,
            Objective::PseudoLabel => pseudo_label_objective(&mut tape, &seqs, &mask)?,
        };
        let Some(loss) = loss else {
            report.losses.push(None);
            report.skipped = true;
            observer(
                StepEvent {
                    step: k,
                    loss: None,
                    kept_count: 0,
                    updated: false,
                },
                model,
            );
            continue;
        };
        let value = tape.value(loss)[0];
        report.losses.push(Some(value));
        if !value.is_finite() {
            report.numeric_failure = true;
            return Ok(());
        }

        tape.backward(loss)?;
        let params = model.params_mut();
        params.zero_grad();
        params.accumulate_grads(&tape, &binding)?;
        let paths: Vec<String> = params.adaptable_paths().iter().cloned().collect();
        let finite = paths.iter().all(|p| {
            params
                .get(p)
                .and_then(|t| t.grad())
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
        });
        if !finite {
            report.numeric_failure = true;
            return Ok(());
        }
        for p in &paths {
            let t = params.get_mut(p).expect("adaptable path exists");
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (w, d) in t.data_mut().iter_mut().zip(&g) {
                *w -= config.lr * d;
            }
        }
        params.zero_grad();
        let updated = !paths.is_empty();
        if updated {
            report.updates += 1;
        }
        observer(
            StepEvent {
                step: k,
                loss: Some(value),
                kept_count: mask.kept_count(),
                updated,
            },
            model,
        );
    }
    Ok(())
}

/// Adapts every batch independently. The model ends bit-identical to how it started.
pub fn run_stream(
    model: &mut Model,
    batches: &[Vec<TestInput>],
    config: &AdaptationConfig,
) -> Result<Vec<EpisodeReport>> {
    batches
        .iter()
        .map(|batch| adapt_episode(model, batch, config))
        .collect()
}
