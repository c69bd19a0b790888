//! Synthetic "speech": every codebook token is a short chirped tone.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corrupt::{mix_at_snr, synth_noise, NoiseKind};
use crate::error::{Error, Result};
use crate::slm::CodebookVocab;

/// Floor added before the logarithm of band energies.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameSpec {
    /// Analysis window in samples (Hann).
    pub window: usize,
    pub hop: usize,
    /// FFT size, at least `window`.
    pub n_fft: usize,
    /// Number of triangular bands (= model `audio_dim`).
    pub n_bands: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            window: 400,
            hop: 160,
            n_fft: 512,
            n_bands: 32,
            f_min: 200.0,
            f_max: 3600.0,
        }
    }
}

impl FrameSpec {
    /// Frames produced from `len` samples (no padding).
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.hop + 1
        }
    }

    /// Center frequencies of the triangular bands, linearly spaced.
    pub fn band_centers(&self) -> Vec<f64> {
        let step = (self.f_max - self.f_min) / (self.n_bands + 1) as f64;
        (1..=self.n_bands)
            .map(|b| self.f_min + b as f64 * step)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.n_bands == 0 || self.n_fft < self.window {
            return Err(Error::Config("invalid frame spec".into()));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min) {
            return Err(Error::Config("invalid band frequency range".into()));
        }
        Ok(())
    }
}

/// Waveform primitive of one token: a tone starting at `base_hz` that sweeps
/// linearly at `chirp_hz_per_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub base_hz: f64,
    pub chirp_hz_per_s: f64,
}

/// Noise mixed into every rendered utterance at an SNR drawn per utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Background {
    pub kind: NoiseKind,
    /// Inclusive SNR range in dB.
    pub snr_db_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTask {
    pub vocab: CodebookVocab,
    /// Inclusive range of content tokens per utterance.
    pub tokens_per_utterance: (usize, usize),
    /// One tone per codebook entry; specials carry a placeholder and are never rendered.
    pub tone_map: Vec<Tone>,
    pub frame: FrameSpec,
    pub fs: u32,
    pub token_duration_s: f64,
    pub gap_duration_s: f64,
    /// Per-token amplitude drawn uniformly from this range.
    pub amplitude_range: (f64, f64),
    /// Background noise of the source domain.
    pub background: Option<Background>,
    /// Prompt used for every utterance of the transcription task.
    pub prompt: Vec<usize>,
    /// Scale every waveform to this RMS before feature extraction; `None` keeps the raw level.
    pub input_rms: Option<f64>,
}

impl Default for SynthTask {
    fn default() -> Self {
        let vocab = CodebookVocab::default();
        let content = vocab.content_tokens();
        let tone_map = (0..vocab.size)
            .map(|tok| match content.iter().position(|&c| c == tok) {
                Some(i) => Tone {
                    base_hz: 300.0 + 110.0 * i as f64,
                    chirp_hz_per_s: 500.0 * ((i % 3) as f64 - 1.0),
                },
                None => Tone {
                    base_hz: 0.0,
                    chirp_hz_per_s: 0.0,
                },
            })
            .collect();
        Self {
            vocab,
            tokens_per_utterance: (4, 10),
            tone_map,
            frame: FrameSpec::default(),
            fs: 16_000,
            token_duration_s: 0.08,
            gap_duration_s: 0.02,
            amplitude_range: (0.5, 1.0),
            background: Some(Background {
                kind: NoiseKind::Pink,
                snr_db_range: (0.0, 10.0),
            }),
            prompt: vec![0],
            input_rms: Some(0.1),
        }
    }
}

impl SynthTask {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        self.frame.validate()?;
        if self.tone_map.len() != self.vocab.size {
            return Err(Error::Config("tone_map must cover the vocabulary".into()));
        }
        let (lo, hi) = self.tokens_per_utterance;
        if lo == 0 || lo > hi {
            return Err(Error::Config("invalid tokens_per_utterance".into()));
        }
        let mut bases: Vec<f64> = self
            .vocab
            .content_tokens()
            .iter()
            .map(|&t| self.tone_map[t].base_hz)
            .collect();
        bases.sort_by(f64::total_cmp);
        if bases.windows(2).any(|w| w[1] - w[0] < 50.0) {
            return Err(Error::Config(
                "token base frequencies must be >= 50 Hz apart".into(),
            ));
        }
        if let Some(bg) = &self.background {
            let (lo, hi) = bg.snr_db_range;
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config("invalid background SNR range".into()));
            }
        }
        if self.input_rms.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config("input_rms must be positive".into()));
        }
        if !(self.token_duration_s > 0.0 && self.gap_duration_s >= 0.0) {
            return Err(Error::Config("invalid token timing".into()));
        }
        Ok(())
    }

    pub fn token_samples(&self) -> usize {
        (self.token_duration_s * self.fs as f64).round() as usize
    }

    pub fn gap_samples(&self) -> usize {
        (self.gap_duration_s * self.fs as f64).round() as usize
    }

    /// Average frequency of a token's tone over its duration.
    pub fn mean_frequency(&self, token: usize) -> f64 {
        let t = &self.tone_map[token];
        t.base_hz + 0.5 * t.chirp_hz_per_s * self.token_duration_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: usize,
    #[serde(skip)]
    pub waveform: Vec<f64>,
    pub tokens: Vec<usize>,
    pub prompt: Vec<usize>,
    pub split: Split,
    /// Seed that, with `tokens`, reproduces `waveform` via [`render_tokens`].
    pub render_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Renders tokens as consecutive tone segments separated by silent gaps,
/// with a leading and trailing gap.
pub fn render_tokens(task: &SynthTask, tokens: &[usize], seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = task.fs as f64;
    let seg = task.token_samples();
    let gap = task.gap_samples();
    let ramp = ((0.005 * fs) as usize).min(seg / 2).max(1);
    let mut out = vec![0.0; gap];
    for &tok in tokens {
        let tone = task.tone_map.get(tok).ok_or(Error::IndexOutOfRange {
            index: tok,
            size: task.tone_map.len(),
        })?;
        let (lo, hi) = task.amplitude_range;
        let amp = if lo < hi {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        let phase = rng.random_range(0.0..2.0 * PI);
        for n in 0..seg {
            let t = n as f64 / fs;
            let inst = 2.0 * PI * (tone.base_hz * t + 0.5 * tone.chirp_hz_per_s * t * t);
            let env = if n < ramp {
                0.5 * (1.0 - (PI * n as f64 / ramp as f64).cos())
            } else if n >= seg - ramp {
                0.5 * (1.0 - (PI * (seg - 1 - n) as f64 / ramp as f64).cos())
            } else {
                1.0
            };
            out.push(amp * env * (inst + phase).sin());
        }
        out.extend(std::iter::repeat_n(0.0, gap));
    }
    if let Some(bg) = &task.background {
        let (lo, hi) = bg.snr_db_range;
        let snr = if lo < hi {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let noise = synth_noise(bg.kind, out.len(), rng.random())?;
        out = mix_at_snr(&out, &noise, snr)?;
    }
    Ok(out)
}

fn make_utterance(task: &SynthTask, id: usize, split: Split, seed: u64) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = task.vocab.content_tokens();
    let (lo, hi) = task.tokens_per_utterance;
    let n = rng.random_range(lo..=hi);
    let tokens: Vec<usize> = (0..n)
        .map(|_| content[rng.random_range(0..content.len())])
        .collect();
    let render_seed = rng.random();
    Ok(Utterance {
        id,
        waveform: render_tokens(task, &tokens, render_seed)?,
        tokens,
        prompt: task.prompt.clone(),
        split,
        render_seed,
    })
}

/// Random token sequences rendered to audio. Deterministic in `seed`.
pub fn synth_dataset(
    task: &SynthTask,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    task.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("dataset splits must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n_train + n_test).map(|_| rng.random()).collect();
    let all: Vec<Utterance> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let split = if i < n_train {
                Split::Train
            } else {
                Split::Test
            };
            make_utterance(task, i, split, s)
        })
        .collect::<Result<_>>()?;
    let mut train = all;
    let test = train.split_off(n_train);
    Ok(Dataset { train, test })
}

/// Log band energies: Hann-windowed frames, magnitude spectrum, triangular
/// band integration, `ln(e + 1e-8)`. Returns `[frames x n_bands]`.
pub fn extract_features(waveform: &[f64], frame: &FrameSpec, fs: u32) -> Result<Tensor> {
    frame.validate()?;
    let n_frames = frame.frame_count(waveform.len());
    if n_frames == 0 {
        return Err(Error::InputTooShort {
            op: "extract_features",
            needed: frame.window,
            got: waveform.len(),
        });
    }
    let window: Vec<f64> = (0..frame.window)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / frame.window as f64).cos())
        .collect();
    let bin_hz = fs as f64 / frame.n_fft as f64;
    let centers = frame.band_centers();
    let width = (frame.f_max - frame.f_min) / (frame.n_bands + 1) as f64;
    let n_bins = frame.n_fft / 2 + 1;
    // weights[b][k]
    let weights: Vec<Vec<f64>> = centers
        .iter()
        .map(|&c| {
            (0..n_bins)
                .map(|k| (1.0 - (k as f64 * bin_hz - c).abs() / width).max(0.0))
                .collect()
        })
        .collect();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); frame.n_fft];
    let mut out = Vec::with_capacity(n_frames * frame.n_bands);
    for f in 0..n_frames {
        let start = f * frame.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < frame.window {
                Complex::new(waveform[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for w in &weights {
            let e: f64 = w
                .iter()
                .zip(&buf[..n_bins])
                .map(|(wk, c)| wk * c.norm())
                .sum();
            out.push((e + LOG_FLOOR).ln());
        }
    }
    Tensor::new(out, vec![n_frames, frame.n_bands])
}

/// Model input for a waveform: optional level normalization, then [`extract_features`].
pub fn front_end(task: &SynthTask, waveform: &[f64]) -> Result<Tensor> {
    match task.input_rms {
        Some(target) => {
            let rms = crate::corrupt::mean_square(waveform).sqrt();
            let g = if rms > 0.0 { target / rms } else { 1.0 };
            let scaled: Vec<f64> = waveform.iter().map(|v| v * g).collect();
            extract_features(&scaled, &task.frame, task.fs)
        }
        None => extract_features(waveform, &task.frame, task.fs),
    }
}
