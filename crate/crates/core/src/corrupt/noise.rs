use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::room::SAMPLE_RATE;

/// Synthetic noise families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    /// Power falling off as `1/f` (-3 dB per octave).
    Pink,
    /// Eight randomly amplitude-modulated tones.
    Babble,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "white" => Ok(Self::White),
            "pink" => Ok(Self::Pink),
            "babble" => Ok(Self::Babble),
            _ => Err(Error::Config(format!("unknown noise kind {s:?}"))),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::White => "white",
            Self::Pink => "pink",
            Self::Babble => "babble",
        })
    }
}

pub fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn normalize_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = mean_square(&x).sqrt();
    if rms > 0.0 {
        for v in &mut x {
            *v /= rms;
        }
    }
    x
}

fn white(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// White noise shaped by `1/sqrt(f)` in the frequency domain.
fn pink(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut spec: Vec<Complex<f64>> = white(len, rng)
        .into_iter()
        .map(|r| Complex::new(r, 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(len).process(&mut spec);
    spec[0] = Complex::new(0.0, 0.0);
    for (k, c) in spec.iter_mut().enumerate().skip(1) {
        let bin = k.min(len - k) as f64;
        *c /= bin.sqrt();
    }
    planner.plan_fft_inverse(len).process(&mut spec);
    spec.into_iter().map(|c| c.re).collect()
}

fn babble(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; len];
    for _ in 0..8 {
        let freq = rng.random_range(150.0..3800.0);
        let am_rate = rng.random_range(2.0..8.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let am_phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.5..1.0);
        for (n, o) in out.iter_mut().enumerate() {
            let t = n as f64 / fs;
            let env = 0.5 * (1.0 + (2.0 * PI * am_rate * t + am_phase).sin());
            *o += amp * env * (2.0 * PI * freq * t + phase).sin();
        }
    }
    out
}

/// Unit-RMS synthetic noise, deterministic per seed.
pub fn synth_noise(kind: NoiseKind, length: usize, seed: u64) -> Result<Vec<f64>> {
    if length == 0 {
        return Err(Error::Contract("noise length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = match kind {
        NoiseKind::White => white(length, &mut rng),
        NoiseKind::Pink => pink(length, &mut rng),
        NoiseKind::Babble => babble(length, &mut rng),
    };
    Ok(normalize_rms(raw))
}

/// Noise tiled or cropped to exactly `len` samples.
pub fn fit_length(noise: &[f64], len: usize) -> Vec<f64> {
    noise.iter().copied().cycle().take(len).collect()
}

/// Gain `g` such that `10 log10(P_clean / P_{g noise}) = snr_db`, with powers
/// measured as mean squares over the clean signal's duration.
pub fn noise_gain(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<f64> {
    if clean.is_empty() || noise.is_empty() {
        return Err(Error::DegenerateInput("empty signal".into()));
    }
    let p_clean = mean_square(clean);
    if p_clean == 0.0 {
        return Err(Error::DegenerateInput("clean signal is silent".into()));
    }
    let p_noise = mean_square(&fit_length(noise, clean.len()));
    if p_noise == 0.0 {
        return Err(Error::DegenerateInput("noise is silent".into()));
    }
    Ok((p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `clean + g * noise` at the requested SNR.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    let g = noise_gain(clean, noise, snr_db)?;
    let noise = fit_length(noise, clean.len());
    Ok(clean.iter().zip(&noise).map(|(c, n)| c + g * n).collect())
}
