//! Image-source simulation of a rectangular ("shoebox") room.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const SAMPLE_RATE: u32 = 16_000;
/// Minimum distance between any position and any wall.
pub const WALL_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Target,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// `[Lx, Ly, Lz]` in meters.
    pub dims: [f64; 3],
    /// Energy absorption shared by all six walls.
    pub absorption: f64,
    pub source_pos: [f64; 3],
    pub noise_pos: [f64; 3],
    pub mic_pos: [f64; 3],
    /// Maximum number of wall reflections per image.
    pub order: u32,
    pub fs: u32,
    pub sound_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    pub taps: Vec<f64>,
    pub fs: u32,
}

impl ImpulseResponse {
    /// `(index, amplitude)` of every nonzero tap, in index order.
    pub fn nonzero_taps(&self) -> Vec<(usize, f64)> {
        self.taps
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(i, &a)| (i, a))
            .collect()
    }

    pub fn first_nonzero(&self) -> Option<usize> {
        self.taps.iter().position(|&a| a != 0.0)
    }
}

pub(crate) fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl RoomSpec {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&l| !(l > 2.0 * WALL_MARGIN)) {
            return Err(Error::Geometry(format!("room dimensions {:?}", self.dims)));
        }
        // alpha = 1 is accepted as the fully absorbing (anechoic) limit
        if !(self.absorption > 0.0 && self.absorption <= 1.0) {
            return Err(Error::Geometry(format!(
                "absorption {} outside (0, 1]",
                self.absorption
            )));
        }
        if self.fs == 0 || !(self.sound_speed > 0.0) {
            return Err(Error::Geometry(
                "sample rate and sound speed must be positive".into(),
            ));
        }
        for (name, p) in [
            ("source", self.source_pos),
            ("noise", self.noise_pos),
            ("mic", self.mic_pos),
        ] {
            for (axis, (&v, &l)) in p.iter().zip(&self.dims).enumerate() {
                if v < WALL_MARGIN || v > l - WALL_MARGIN {
                    return Err(Error::Geometry(format!(
                        "{name} position {p:?} is within {WALL_MARGIN} m of wall on axis {axis}"
                    )));
                }
            }
        }
        if distance(self.source_pos, self.mic_pos) == 0.0
            || distance(self.noise_pos, self.mic_pos) == 0.0
        {
            return Err(Error::Geometry(
                "a source coincides with the microphone".into(),
            ));
        }
        Ok(())
    }

    pub fn position(&self, source: SourceKind) -> [f64; 3] {
        match source {
            SourceKind::Target => self.source_pos,
            SourceKind::Noise => self.noise_pos,
        }
    }

    /// Draws a room with per-axis dimensions in `[3,10] x [3,10] x [2,5]` m,
    /// absorption in `[0.1, 0.4]`, and positions at least 0.5 m from every wall.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, order: u32) -> Self {
        let dims = [
            rng.random_range(3.0..=10.0),
            rng.random_range(3.0..=10.0),
            rng.random_range(2.0..=5.0),
        ];
        let absorption = rng.random_range(0.1..=0.4);
        let margin = 0.5;
        let point = |rng: &mut R| -> [f64; 3] {
            [0, 1, 2].map(|i| rng.random_range(margin..=dims[i] - margin))
        };
        let mic_pos = point(rng);
        let mut source_pos = point(rng);
        while distance(source_pos, mic_pos) < 0.5 {
            source_pos = point(rng);
        }
        let mut noise_pos = point(rng);
        while distance(noise_pos, mic_pos) < 0.5 {
            noise_pos = point(rng);
        }
        Self {
            dims,
            absorption,
            source_pos,
            noise_pos,
            mic_pos,
            order,
            fs: SAMPLE_RATE,
            sound_speed: SPEED_OF_SOUND,
        }
    }
}

/// Image coordinate along one axis for signed image index `l`; `|l|` is the
/// number of reflections off this axis' walls.
fn image_coord(l: i64, src: f64, len: f64) -> f64 {
    if l % 2 == 0 {
        l as f64 * len + src
    } else {
        (l + 1) as f64 * len - src
    }
}

/// All image sources with at most `room.order` total reflections, as
/// `(position, reflection_count)`.
pub fn image_sources(room: &RoomSpec, source: SourceKind) -> Vec<([f64; 3], u32)> {
    let n = room.order as i64;
    let src = room.position(source);
    let mut out = Vec::new();
    for lx in -n..=n {
        for ly in -(n - lx.abs())..=(n - lx.abs()) {
            let rest = n - lx.abs() - ly.abs();
            for lz in -rest..=rest {
                let pos = [
                    image_coord(lx, src[0], room.dims[0]),
                    image_coord(ly, src[1], room.dims[1]),
                    image_coord(lz, src[2], room.dims[2]),
                ];
                let r = (lx.abs() + ly.abs() + lz.abs()) as u32;
                out.push((pos, r));
            }
        }
    }
    out
}

/// Shoebox room impulse response by the image-source method.
///
/// Each image at distance `d` from the microphone after `r` reflections adds
/// `(1 - alpha)^(r/2) / (4 pi d)` at sample `round(fs d / c)`.
pub fn simulate_rir(room: &RoomSpec, source: SourceKind) -> Result<ImpulseResponse> {
    room.validate()?;
    let fs = room.fs as f64;
    let reflection = 1.0 - room.absorption;
    let taps: Vec<(usize, f64)> = image_sources(room, source)
        .into_iter()
        .map(|(pos, r)| {
            let d = distance(pos, room.mic_pos);
            let idx = (fs * d / room.sound_speed).round() as usize;
            let amp = reflection.powf(r as f64 / 2.0) / (4.0 * PI * d);
            (idx, amp)
        })
        .collect();
    let len = taps.iter().map(|(i, _)| i + 1).max().unwrap_or(1);
    let mut h = vec![0.0; len];
    for (i, a) in taps {
        h[i] += a;
    }
    Ok(ImpulseResponse {
        taps: h,
        fs: room.fs,
    })
}

/// Linear convolution `x * h`, truncated to `len(x)`.
pub fn apply_reverb(x: &[f64], h: &ImpulseResponse) -> Result<Vec<f64>> {
    if x.is_empty() || h.taps.is_empty() {
        return Err(Error::Contract(
            "reverb needs non-empty signal and response".into(),
        ));
    }
    let mut y = vec![0.0; x.len()];
    for (k, &a) in h.taps.iter().enumerate() {
        if a == 0.0 || k >= x.len() {
            continue;
        }
        for (yo, &xi) in y[k..].iter_mut().zip(x) {
            *yo += a * xi;
        }
    }
    Ok(y)
}

/// FFT-based [`apply_reverb`] with the same contract.
pub fn apply_reverb_fft(x: &[f64], h: &ImpulseResponse) -> Result<Vec<f64>> {
    if x.is_empty() || h.taps.is_empty() {
        return Err(Error::Contract(
            "reverb needs non-empty signal and response".into(),
        ));
    }
    let n = (x.len() + h.taps.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |s: &[f64]| {
        let mut v: Vec<Complex<f64>> = s.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let mut a = pad(x);
    let mut b = pad(&h.taps);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    Ok(a[..x.len()].iter().map(|c| c.re / n as f64).collect())
}
