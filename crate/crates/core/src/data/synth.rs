use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Every synthesized signal is normalized to this RMS.
pub const SURROGATE_RMS: f64 = 0.1;

const BABBLE_VOICES: u64 = 6;

/// Families of synthetic background noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NoiseKind {
    White,
    Pink,
    BabbleSurrogate,
    Impulsive,
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 5] = [
        NoiseKind::White,
        NoiseKind::Pink,
        NoiseKind::BabbleSurrogate,
        NoiseKind::Impulsive,
        NoiseKind::Hum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "WHITE",
            NoiseKind::Pink => "PINK",
            NoiseKind::BabbleSurrogate => "BABBLE_SURROGATE",
            NoiseKind::Impulsive => "IMPULSIVE",
            NoiseKind::Hum => "HUM",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase().replace('-', "_");
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == up || (up == "BABBLE" && *k == NoiseKind::BabbleSurrogate))
            .ok_or_else(|| Error::Config(format!("unknown noise kind `{s}`")))
    }
}

fn sample_count(duration_s: f64, sample_rate: u32) -> Result<usize> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    Ok(((duration_s * sample_rate as f64).round() as usize).max(1))
}

fn normalized(mut x: Vec<f64>, sample_rate: u32) -> Result<Waveform> {
    let r = crate::audio::rms(&x);
    if r > 0.0 {
        let g = SURROGATE_RMS / r;
        x.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(x, sample_rate)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Speech surrogate: a harmonic complex with a slowly varying F0 in 90-300 Hz, three
/// drifting formant resonances, a syllabic-rate (2-6 Hz) envelope with occasional pauses,
/// and a little aspiration noise. Normalized to [`SURROGATE_RMS`].
pub fn synthesize_clean(seed: u64, duration_s: f64, sample_rate: u32) -> Result<Waveform> {
    let n = sample_count(duration_s, sample_rate)?;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0_base: f64 = rng.random_range(100.0..210.0);
    let f0_depth: f64 = rng.random_range(0.08..0.3);
    let f0_rate: f64 = rng.random_range(0.3..1.5);
    let f0_phase: f64 = rng.random_range(0.0..TAU);
    let syllable_rate: f64 = rng.random_range(2.0..6.0);
    let formants: Vec<(f64, f64, f64, f64)> = [(300.0, 800.0, 90.0), (900.0, 2200.0, 140.0), (2400.0, 3300.0, 220.0)]
        .iter()
        .map(|&(lo, hi, bw)| {
            (
                rng.random_range(lo..hi),
                bw,
                rng.random_range(0.05..0.2),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let n_syllables = (duration_s * syllable_rate).ceil() as usize + 2;
    let syllable_amp: Vec<f64> = (0..n_syllables)
        .map(|i| {
            if i > 0 && rng.random_bool(0.15) {
                0.0
            } else {
                rng.random_range(0.5..1.0)
            }
        })
        .collect();
    let aspiration = gaussian(&mut rng, n);

    let f_top = (0.45 * sr).min(5000.0);
    let max_harmonics = (f_top / 90.0) as usize;
    let mut phases = vec![0.0; max_harmonics];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f0 = (f0_base * (1.0 + f0_depth * (TAU * f0_rate * t + f0_phase).sin())).clamp(90.0, 300.0);
        // start half-way into the first syllable so the first sample is voiced
        let psi = syllable_rate * t + 0.5;
        let env = syllable_amp[psi as usize] * (PI * psi.fract()).sin().powi(2);
        let drift = (TAU * syllable_rate * 0.5 * t).sin();
        let mut s = 0.0;
        for (h, phase) in phases.iter_mut().enumerate() {
            let fh = (h + 1) as f64 * f0;
            if fh >= f_top {
                break;
            }
            *phase = (*phase + TAU * fh / sr) % TAU;
            let mut gain = 0.04 / (h + 1) as f64;
            for &(fc, bw, depth, ph) in &formants {
                let c = fc * (1.0 + depth * (drift + ph).sin());
                gain += (-0.5 * ((fh - c) / bw).powi(2)).exp();
            }
            s += gain * phase.sin();
        }
        out.push(env * (s + 0.05 * aspiration[i]));
    }
    normalized(out, sample_rate)
}

/// Noise of the named family, normalized to [`SURROGATE_RMS`].
pub fn synthesize_noise(kind: NoiseKind, seed: u64, duration_s: f64, sample_rate: u32) -> Result<Waveform> {
    let n = sample_count(duration_s, sample_rate)?;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = match kind {
        NoiseKind::White => gaussian(&mut rng, n),
        NoiseKind::Pink => pink(&mut rng, n),
        NoiseKind::BabbleSurrogate => {
            let mut acc = vec![0.0; n];
            for v in 0..BABBLE_VOICES {
                let voice = synthesize_clean(derive_seed(seed, "babble", v), duration_s, sample_rate)?;
                for (a, s) in acc.iter_mut().zip(voice.samples()) {
                    *a += s;
                }
            }
            acc
        }
        NoiseKind::Impulsive => {
            let mut x: Vec<f64> = gaussian(&mut rng, n).into_iter().map(|v| 0.01 * v).collect();
            let events = ((duration_s * 4.0).round() as usize).max(1);
            for _ in 0..events {
                let start = rng.random_range(0..n);
                let len = (rng.random_range(0.002..0.015) * sr) as usize + 1;
                let amp: f64 = rng.random_range(0.5..1.0);
                let decay = len as f64 / 4.0;
                for k in 0..len.min(n - start) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x[start + k] += amp * (-(k as f64) / decay).exp() * z;
                }
            }
            x
        }
        NoiseKind::Hum => {
            let base = if rng.random_bool(0.5) { 50.0 } else { 60.0 };
            let harmonics: Vec<(f64, f64)> = (1..=10)
                .map(|h| (1.0 / h as f64, rng.random_range(0.0..TAU)))
                .collect();
            let wobble: f64 = rng.random_range(0.1..0.5);
            let floor = gaussian(&mut rng, n);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let s: f64 = harmonics
                        .iter()
                        .enumerate()
                        .map(|(h, (a, ph))| a * (TAU * base * (h + 1) as f64 * t + ph).sin())
                        .sum();
                    s * (1.0 + 0.1 * (TAU * wobble * t).sin()) + 0.01 * floor[i]
                })
                .collect()
        }
    };
    normalized(x, sample_rate)
}

/// White Gaussian noise shaped by 1/sqrt(f) in the frequency domain (power ∝ 1/f).
fn pink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut buf: Vec<Complex64> = gaussian(rng, n).into_iter().map(|v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex64::new(0.0, 0.0);
    for k in 1..n {
        let folded = k.min(n - k) as f64;
        buf[k] /= folded.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}
