//! Supervised pretraining of the source model on clean synthetic audio.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::slm::{AdaptableSet, Model};

use super::synth::{front_end, SynthTask, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    /// Upper bound on passes over the training split.
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Training utterances held out for the stopping rule.
    pub heldout: usize,
    /// Stop once held-out teacher-forced token accuracy reaches this fraction.
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            lr: 2e-3,
            batch_size: 16,
            clip_norm: 1.0,
            heldout: 200,
            target_accuracy: 0.995,
            seed: 0,
        }
    }
}

impl PretrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "max_epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid pretraining lr {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::Config("target_accuracy must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean token cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    /// Held-out teacher-forced token accuracy per epoch.
    pub heldout_accuracy: Vec<f64>,
    pub reached_target: bool,
    pub wall_time_s: f64,
}

impl TrainingReport {
    pub fn final_accuracy(&self) -> f64 {
        self.heldout_accuracy.last().copied().unwrap_or(0.0)
    }
}

/// Features plus the gold decoder targets (content tokens followed by EOS).
pub(crate) struct Example {
    pub features: Tensor,
    pub prompt: Vec<usize>,
    pub targets: Vec<usize>,
}

pub(crate) fn examples(task: &SynthTask, utts: &[Utterance]) -> Result<Vec<Example>> {
    utts.par_iter()
        .map(|u| {
            let mut targets = u.tokens.clone();
            targets.push(task.vocab.eos);
            Ok(Example {
                features: front_end(task, &u.waveform)?,
                prompt: u.prompt.clone(),
                targets,
            })
        })
        .collect()
}

/// Summed token NLL and its gradient for every parameter, in path order.
fn sample_gradient(model: &Model, ex: &Example) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let seq = model.teacher_forced_distributions(
        &mut tape,
        &binding,
        &ex.features,
        &ex.prompt,
        &ex.targets,
    )?;
    let nll = tape.softmax_nll(seq.logits, &ex.targets)?;
    let loss = tape.sum(nll);
    tape.backward(loss)?;
    let grads = model
        .params()
        .iter()
        .map(|(path, t)| {
            binding
                .get(path)
                .and_then(|v| tape.grad(v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    Ok((tape.value(loss)[0], grads))
}

/// Teacher-forced token accuracy (EOS included).
pub(crate) fn token_accuracy(model: &Model, data: &[Example]) -> Result<f64> {
    let counts: Vec<(usize, usize)> = data
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let seq = model.teacher_forced_distributions(
                &mut tape,
                &binding,
                &ex.features,
                &ex.prompt,
                &ex.targets,
            )?;
            let hits = seq
                .distributions
                .iter()
                .zip(&ex.targets)
                .filter(|(d, &t)| d.argmax() == t)
                .count();
            Ok((hits, ex.targets.len()))
        })
        .collect::<Result<_>>()?;
    let (hits, total) = counts.iter().fold((0, 0), |(h, n), &(a, b)| (h + a, n + b));
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, (_, t)) in model.params_mut().iter_mut().enumerate() {
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                self.m[i][j] = Self::B1 * self.m[i][j] + (1.0 - Self::B1) * g;
                self.v[i][j] = Self::B2 * self.v[i][j] + (1.0 - Self::B2) * g * g;
                *w -= lr * (self.m[i][j] / c1) / ((self.v[i][j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains every parameter with Adam on token cross-entropy. Training stops
/// when held-out accuracy reaches the target or after `max_epochs`.
pub fn pretrain(
    model: &mut Model,
    task: &SynthTask,
    train: &[Utterance],
    settings: &PretrainSettings,
) -> Result<TrainingReport> {
    settings.validate()?;
    let start = std::time::Instant::now();
    let heldout_n = settings.heldout.min(train.len() / 5);
    let (fit_utts, held_utts) = train.split_at(train.len() - heldout_n);
    if fit_utts.is_empty() {
        return Err(Error::Config("no training utterances".into()));
    }
    let fit = examples(task, fit_utts)?;
    let held = examples(task, held_utts)?;

    let previous = model.params().selection();
    model.select_adaptable(AdaptableSet::All);
    let mut adam = Adam::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut report = TrainingReport {
        epoch_losses: Vec::new(),
        heldout_accuracy: Vec::new(),
        reached_target: false,
        wall_time_s: 0.0,
    };

    for _ in 0..settings.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let results: Vec<(f64, Vec<Vec<f64>>)> = chunk
                .par_iter()
                .map(|&i| sample_gradient(model, &fit[i]))
                .collect::<Result<_>>()?;
            let tokens: usize = chunk.iter().map(|&i| fit[i].targets.len()).sum();
            let mut total = results[0].1.clone();
            for (_, g) in &results[1..] {
                for (acc, part) in total.iter_mut().zip(g) {
                    for (a, b) in acc.iter_mut().zip(part) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / tokens as f64;
            let mut norm_sq = 0.0;
            for g in total.iter_mut().flatten() {
                *g *= scale;
                norm_sq += *g * *g;
            }
            if !norm_sq.is_finite() {
                return Err(Error::NonFinite("pretraining gradient"));
            }
            let norm = norm_sq.sqrt();
            if settings.clip_norm > 0.0 && norm > settings.clip_norm {
                let c = settings.clip_norm / norm;
                total.iter_mut().flatten().for_each(|g| *g *= c);
            }
            adam.step(model, &total, settings.lr);
            loss_sum += results.iter().map(|(l, _)| l).sum::<f64>();
            token_sum += tokens;
        }
        report.epoch_losses.push(loss_sum / token_sum as f64);
        let acc = token_accuracy(model, if held.is_empty() { &fit } else { &held })?;
        report.heldout_accuracy.push(acc);
        log::info!(
            "epoch {}: loss {:.4}, held-out accuracy {:.4}",
            report.epoch_losses.len(),
            loss_sum / token_sum as f64,
            acc
        );
        if acc >= settings.target_accuracy {
            report.reached_target = true;
            break;
        }
    }

    match previous {
        Some(set) => model.select_adaptable(set),
        None => model.params_mut().clear_selection(),
    }
    model.params_mut().zero_grad();
    if report.final_accuracy() < 0.9 {
        log::warn!(
            "pretraining reached only {:.1}% held-out token accuracy",
            100.0 * report.final_accuracy()
        );
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}
