//! Acoustic corruption of clean waveforms: additive noise at a target SNR
//! (anechoic) and image-source reverberation of speech and noise followed by
//! mixing (reverberant).

mod noise;
mod room;
mod wav;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use noise::{fit_length, mean_square, mix_at_snr, noise_gain, synth_noise, NoiseKind};
pub use room::{
    apply_reverb, apply_reverb_fft, image_sources, simulate_rir, ImpulseResponse, RoomSpec,
    SourceKind, SAMPLE_RATE, SPEED_OF_SOUND, WALL_MARGIN,
};
pub use wav::{read_wav, write_wav};

/// Image-source order used for sampled rooms.
pub const REVERB_ORDER: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CorruptionKind {
    Clean,
    AnechoicNoise,
    ReverbNoise,
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "CLEAN" => Ok(Self::Clean),
            "ANECHOIC_NOISE" => Ok(Self::AnechoicNoise),
            "REVERB_NOISE" => Ok(Self::ReverbNoise),
            _ => Err(Error::Config(format!("unknown corruption kind {s:?}"))),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clean => "CLEAN",
            Self::AnechoicNoise => "ANECHOIC_NOISE",
            Self::ReverbNoise => "REVERB_NOISE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Inclusive SNR range in dB; each call draws uniformly from it.
    pub snr_db_range: (f64, f64),
    pub room_sampler_seed: u64,
    pub noise_kind: NoiseKind,
}

impl CorruptionSpec {
    pub fn clean() -> Self {
        Self {
            kind: CorruptionKind::Clean,
            snr_db_range: (0.0, 0.0),
            room_sampler_seed: 0,
            noise_kind: NoiseKind::Pink,
        }
    }

    /// Additive noise at -5..5 dB SNR.
    pub fn anechoic(noise_kind: NoiseKind) -> Self {
        Self {
            kind: CorruptionKind::AnechoicNoise,
            snr_db_range: (-5.0, 5.0),
            room_sampler_seed: 0,
            noise_kind,
        }
    }

    /// Reverberated speech and noise mixed at 10..20 dB SNR.
    pub fn reverberant(noise_kind: NoiseKind) -> Self {
        Self {
            kind: CorruptionKind::ReverbNoise,
            snr_db_range: (10.0, 20.0),
            room_sampler_seed: 0,
            noise_kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_db_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("invalid SNR range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Short label such as `ANECHOIC_NOISE[-5,5]`.
    pub fn label(&self) -> String {
        match self.kind {
            CorruptionKind::Clean => "CLEAN".to_string(),
            k => format!("{k}[{},{}]", self.snr_db_range.0, self.snr_db_range.1),
        }
    }
}

/// Random choices made by one [`corrupt`] call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionDraw {
    pub snr_db: Option<f64>,
    pub room: Option<RoomSpec>,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined seeds
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_snr(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// The corruption process `C(x)`; deterministic in `(x, spec, rng_seed)`.
pub fn corrupt(x: &[f64], spec: &CorruptionSpec, rng_seed: u64) -> Result<Vec<f64>> {
    corrupt_with_draw(x, spec, rng_seed).map(|(y, _)| y)
}

/// [`corrupt`], also returning the sampled SNR and room.
pub fn corrupt_with_draw(
    x: &[f64],
    spec: &CorruptionSpec,
    rng_seed: u64,
) -> Result<(Vec<f64>, CorruptionDraw)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.room_sampler_seed, rng_seed));
    match spec.kind {
        CorruptionKind::Clean => Ok((
            x.to_vec(),
            CorruptionDraw {
                snr_db: None,
                room: None,
            },
        )),
        CorruptionKind::AnechoicNoise => {
            let snr = draw_snr(&mut rng, spec.snr_db_range);
            let noise = synth_noise(spec.noise_kind, x.len(), rng.next_u64())?;
            let y = mix_at_snr(x, &noise, snr)?;
            Ok((
                y,
                CorruptionDraw {
                    snr_db: Some(snr),
                    room: None,
                },
            ))
        }
        CorruptionKind::ReverbNoise => {
            let room = RoomSpec::sample(&mut rng, REVERB_ORDER);
            let snr = draw_snr(&mut rng, spec.snr_db_range);
            let noise = synth_noise(spec.noise_kind, x.len(), rng.next_u64())?;
            let speech = apply_reverb(x, &simulate_rir(&room, SourceKind::Target)?)?;
            let noise = apply_reverb(&noise, &simulate_rir(&room, SourceKind::Noise)?)?;
            let y = mix_at_snr(&speech, &noise, snr)?;
            Ok((
                y,
                CorruptionDraw {
                    snr_db: Some(snr),
                    room: Some(room),
                },
            ))
        }
    }
}
