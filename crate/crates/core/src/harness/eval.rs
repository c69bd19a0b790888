//! Corrupted-test-set evaluation with and without adaptation.

use rayon::prelude::*;

use crate::corrupt::{corrupt, CorruptionSpec};
use crate::error::Result;
use crate::slm::{AdaptableSet, GenerationResult, Model};
use crate::tta::{adapt_episode, predict_batch, AdaptationConfig, EpisodeReport, TestInput};

use super::metrics::{ErrorCounter, MetricsRow};
use super::synth::{front_end, SynthTask, Utterance};

/// Batch size used when no adaptation is configured.
pub const BASELINE_BATCH: usize = 5;

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub row: MetricsRow,
    pub episodes: Vec<EpisodeReport>,
    pub hypotheses: Vec<Vec<usize>>,
}

/// Seed of the corruption applied to test utterance `id` under evaluation seed `seed`.
pub fn utterance_seed(seed: u64, id: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(id as u64)
}

/// Corrupts every test utterance and extracts its features.
pub fn corrupted_inputs(
    task: &SynthTask,
    test: &[Utterance],
    corruption: &CorruptionSpec,
    seed: u64,
) -> Result<Vec<TestInput>> {
    test.par_iter()
        .map(|u| {
            let y = corrupt(&u.waveform, corruption, utterance_seed(seed, u.id))?;
            Ok(TestInput {
                features: front_end(task, &y)?,
                prompt: u.prompt.clone(),
            })
        })
        .collect()
}

/// Evaluates `model` on inputs in consecutive batches. With `adaptation`,
/// every batch is an independent episode on a private copy of the model.
pub fn evaluate_inputs(
    model: &Model,
    inputs: &[TestInput],
    adaptation: Option<(&AdaptationConfig, AdaptableSet)>,
) -> Result<(Vec<GenerationResult>, Vec<EpisodeReport>)> {
    let batch = adaptation.map_or(BASELINE_BATCH, |(c, _)| c.batch_size);
    let per_batch: Vec<(Vec<GenerationResult>, Option<EpisodeReport>)> = inputs
        .par_chunks(batch)
        .map(|chunk| match adaptation {
            None => Ok((predict_batch(model, chunk)?, None)),
            Some((config, set)) => {
                let mut local = model.clone();
                local.select_adaptable(set);
                let mut rep = adapt_episode(&mut local, chunk, config)?;
                let preds = std::mem::take(&mut rep.predictions);
                Ok((preds, Some(rep)))
            }
        })
        .collect::<Result<_>>()?;
    let mut preds = Vec::with_capacity(inputs.len());
    let mut episodes = Vec::new();
    for (p, e) in per_batch {
        preds.extend(p);
        episodes.extend(e);
    }
    Ok((preds, episodes))
}

/// One grid cell: corrupt, optionally adapt, decode and score.
pub fn evaluate(
    model: &Model,
    task: &SynthTask,
    test: &[Utterance],
    corruption: &CorruptionSpec,
    adaptation: Option<(&AdaptationConfig, AdaptableSet)>,
    seed: u64,
) -> Result<EvalOutcome> {
    let inputs = corrupted_inputs(task, test, corruption, seed)?;
    score(model, task, test, &inputs, corruption, adaptation, seed)
}

/// [`evaluate`] on already corrupted inputs.
pub fn score(
    model: &Model,
    task: &SynthTask,
    test: &[Utterance],
    inputs: &[TestInput],
    corruption: &CorruptionSpec,
    adaptation: Option<(&AdaptationConfig, AdaptableSet)>,
    seed: u64,
) -> Result<EvalOutcome> {
    let (preds, episodes) = evaluate_inputs(model, inputs, adaptation)?;
    let eos = task.vocab.eos;
    let mut counter = ErrorCounter::default();
    let mut entropy_sum = 0.0;
    let mut entropy_n = 0usize;
    let mut hypotheses = Vec::with_capacity(preds.len());
    for (u, g) in test.iter().zip(&preds) {
        let hyp = g.content_tokens(eos).to_vec();
        counter.add(&u.tokens, &hyp);
        for d in &g.distributions {
            entropy_sum += d.entropy();
            entropy_n += 1;
        }
        hypotheses.push(hyp);
    }
    let row = MetricsRow {
        corruption: corruption.label(),
        seed,
        objective: adaptation.map_or("NONE".to_string(), |(c, _)| c.objective.to_string()),
        selection: adaptation.map_or(AdaptableSet::None.to_string(), |(_, s)| s.to_string()),
        tau: adaptation.map(|(c, _)| c.tau),
        steps: adaptation.map(|(c, _)| c.steps),
        lr: adaptation.map(|(c, _)| c.lr),
        batch_size: adaptation.map_or(BASELINE_BATCH, |(c, _)| c.batch_size),
        n_utterances: test.len(),
        token_error_rate: counter.token_error_rate(),
        sequence_accuracy: counter.sequence_accuracy(),
        mean_entropy: if entropy_n == 0 {
            0.0
        } else {
            entropy_sum / entropy_n as f64
        },
        skipped_steps: episodes
            .iter()
            .map(|e| e.losses.iter().filter(|l| l.is_none()).count())
            .sum(),
        numeric_failures: episodes.iter().filter(|e| e.numeric_failure).count(),
        error: None,
    };
    Ok(EvalOutcome {
        row,
        episodes,
        hypotheses,
    })
}
