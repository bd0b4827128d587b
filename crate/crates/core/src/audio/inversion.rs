use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mel::{mel_power_frames, MelFilterbank, MelSpectrogram};
use super::stft::{Spectrogram, StftPlan};
use super::Waveform;
use crate::error::{Error, Result};
use crate::parallel;

const NNLS_MAX_OUTER: usize = 400;

/// Griffin-Lim phase reconstruction with the accelerated (momentum) update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GriffinLim {
    pub iters: usize,
    /// Extrapolation weight; 0 gives the classic algorithm.
    pub momentum: f64,
    /// Seed of the initial random phase.
    pub seed: u64,
}

impl Default for GriffinLim {
    fn default() -> Self {
        Self {
            iters: 32,
            momentum: 0.99,
            seed: 0,
        }
    }
}

fn check_finite(m: &MelSpectrogram) -> Result<()> {
    if let Some(v) = m.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite mel value {v}")));
    }
    Ok(())
}

/// Non-negative least-squares solution of `F p = m` per frame (Lawson-Hanson active set).
pub fn nnls_mel_to_power(mel_power: &Array2<f64>, fb: &MelFilterbank) -> Array2<f64> {
    let dense = fb.to_dense();
    let frames = mel_power.nrows();
    let rows = parallel::map_indexed(frames, |f| {
        lawson_hanson(&dense, &mel_power.row(f).to_vec())
    });
    Array2::from_shape_vec((frames, fb.n_bins()), rows.concat()).expect("rows are sized")
}

/// Columns are the power spectra of Hann-windowed unit cosines on a grid of
/// `LINE_GRID` frequencies per FFT bin.
struct LineDictionary {
    /// bins × lines
    spectra: Array2<f64>,
    /// mels × lines
    projected: Array2<f64>,
}

const LINE_GRID: usize = 4;

impl LineDictionary {
    fn new(plan: &StftPlan, fb: &MelFilterbank) -> Self {
        let n = plan.window().len();
        let bins = fb.n_bins();
        let lines = (bins - 1) * LINE_GRID + 1;
        let cols = parallel::map_indexed(lines, |j| {
            let nu = j as f64 / LINE_GRID as f64;
            let x: Vec<f64> = (0..n)
                .map(|t| (std::f64::consts::TAU * nu * t as f64 / n as f64).cos())
                .collect();
            plan.frame_spectrum(&x).iter().map(|c| c.norm_sqr()).collect::<Vec<f64>>()
        });
        let mut spectra = Array2::zeros((bins, lines));
        for (j, col) in cols.iter().enumerate() {
            for (k, v) in col.iter().enumerate() {
                spectra[[k, j]] = *v;
            }
        }
        let projected = fb.to_dense().dot(&spectra);
        Self { spectra, projected }
    }

    /// Non-negative line powers whose mel projection best matches each frame, expanded
    /// back to per-bin power.
    fn power(&self, mel_power: &Array2<f64>) -> Array2<f64> {
        let frames = mel_power.nrows();
        let bins = self.spectra.nrows();
        let rows = parallel::map_indexed(frames, |f| {
            let q = lawson_hanson(&self.projected, &mel_power.row(f).to_vec());
            let mut p = vec![0.0; bins];
            for (j, qj) in q.iter().enumerate().filter(|(_, v)| **v > 0.0) {
                for (k, pk) in p.iter_mut().enumerate() {
                    *pk += self.spectra[[k, j]] * qj;
                }
            }
            p
        });
        Array2::from_shape_vec((frames, bins), rows.concat()).expect("rows are sized")
    }
}

/// Minimizes `|A x - m|²` over `x >= 0`.
fn lawson_hanson(a: &Array2<f64>, m: &[f64]) -> Vec<f64> {
    let n = a.ncols();
    let mut x = vec![0.0; n];
    let gradient = |x: &[f64]| -> Vec<f64> {
        let mut r = m.to_vec();
        for (j, xj) in x.iter().enumerate().filter(|(_, v)| **v != 0.0) {
            for (ri, aij) in r.iter_mut().zip(a.column(j)) {
                *ri -= aij * xj;
            }
        }
        (0..n)
            .map(|j| a.column(j).iter().zip(&r).map(|(p, q)| p * q).sum())
            .collect::<Vec<f64>>()
    };
    let mut w = gradient(&x);
    let scale = w.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return x;
    }
    let tol = 1e-11 * scale;
    let mut passive: Vec<usize> = Vec::new();
    let mut in_set = vec![false; n];
    for _ in 0..NNLS_MAX_OUTER {
        let best = (0..n)
            .filter(|&j| !in_set[j])
            .max_by(|&p, &q| w[p].total_cmp(&w[q]));
        let Some(j) = best.filter(|&j| w[j] > tol) else {
            break;
        };
        passive.push(j);
        in_set[j] = true;
        loop {
            let s = solve_passive(a, m, &passive);
            if s.iter().all(|v| *v > 0.0) {
                for (&i, v) in passive.iter().zip(&s) {
                    x[i] = *v;
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (&i, v) in passive.iter().zip(&s) {
                if *v <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - v));
                }
            }
            for (&i, v) in passive.iter().zip(&s) {
                x[i] += alpha * (v - x[i]);
            }
            passive.retain(|&i| {
                let keep = x[i] > 0.0 && x[i] > 1e-14 * x.iter().fold(0.0f64, |p, q| p.max(*q));
                if !keep {
                    x[i] = 0.0;
                    in_set[i] = false;
                }
                keep
            });
            if passive.is_empty() {
                break;
            }
        }
        w = gradient(&x);
    }
    x
}

/// Least squares on the passive columns via Cholesky of their Gram matrix, with a
/// small diagonal jitter.
fn solve_passive(a: &Array2<f64>, m: &[f64], passive: &[usize]) -> Vec<f64> {
    let k = passive.len();
    let cols: Vec<_> = passive.iter().map(|&i| a.column(i)).collect();
    let dot = |p: usize, q: usize| cols[p].iter().zip(cols[q].iter()).map(|(u, v)| u * v).sum::<f64>();
    let trace: f64 = (0..k).map(|i| dot(i, i)).sum();
    let jitter = 1e-13 * trace / k as f64;
    let mut l = vec![0.0; k * k];
    for r in 0..k {
        for c in 0..=r {
            let mut v = dot(r, c);
            if r == c {
                v += jitter;
            }
            for t in 0..c {
                v -= l[r * k + t] * l[c * k + t];
            }
            l[r * k + c] = if r == c { v.max(1e-300).sqrt() } else { v / l[c * k + c] };
        }
    }
    let mut y = vec![0.0; k];
    for r in 0..k {
        let mut v: f64 = cols[r].iter().zip(m).map(|(u, q)| u * q).sum();
        for t in 0..r {
            v -= l[r * k + t] * y[t];
        }
        y[r] = v / l[r * k + r];
    }
    for r in (0..k).rev() {
        let mut v = y[r];
        for t in r + 1..k {
            v -= l[t * k + r] * y[t];
        }
        y[r] = v / l[r * k + r];
    }
    y
}

/// Reconstructs a waveform of length `(L-1)·hop` from a mel-spectrogram using the NNLS
/// magnitude estimate and `iters` Griffin-Lim iterations.
pub fn mel_to_waveform(m: &MelSpectrogram, iters: usize) -> Result<Waveform> {
    GriffinLim {
        iters,
        ..Default::default()
    }
    .reconstruct(m)
}

impl GriffinLim {
    pub fn reconstruct(&self, m: &MelSpectrogram) -> Result<Waveform> {
        if self.iters == 0 {
            return Err(Error::Config("Griffin-Lim needs at least one iteration".into()));
        }
        check_finite(m)?;
        let fb = MelFilterbank::new(&m.frame, &m.mel, m.sample_rate)?;
        let plan = StftPlan::new(m.frame)?;
        let magnitude = LineDictionary::new(&plan, &fb).power(&m.power()).mapv(f64::sqrt);
        let len = m.frame.synthesis_len(m.n_frames());
        if len == 0 {
            return Waveform::new(vec![], m.sample_rate);
        }

        // Iterate on the padded time axis so edge frames are unconstrained by the
        // reflection, then crop.
        let frames = m.n_frames();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut coeffs: Spectrogram = magnitude.mapv(|a| {
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Complex64::from_polar(a, phi)
        });
        let mut prev = coeffs.clone();
        for _ in 0..self.iters {
            let x = plan.overlap_add(&coeffs);
            let mut projected = plan.forward_padded(&x, frames);
            projected.zip_mut_with(&magnitude, |c, &a| {
                let n = c.norm();
                *c = if n > 0.0 { *c * (a / n) } else { Complex64::new(a, 0.0) };
            });
            coeffs = &projected + &((&projected - &prev) * Complex64::new(self.momentum, 0.0));
            prev = projected;
        }
        Waveform::new(plan.inverse(&prev, len), m.sample_rate)
    }
}

/// Reconstructs a waveform by imposing the mel-band power of `m` on a reference STFT.
///
/// The per-bin gain is `sqrt(Fᵀ p̂ / Fᵀ p_ref)` clamped to `[0, max_gain]`, where `p̂` is the
/// target mel power and `p_ref` the mel power of the reference. Phase and fine spectral
/// structure come from the reference.
pub fn guided_inversion(
    m: &MelSpectrogram,
    reference: &Spectrogram,
    len: usize,
    max_gain: f64,
) -> Result<Waveform> {
    check_finite(m)?;
    if reference.nrows() != m.n_frames() || reference.ncols() != m.frame.n_bins() {
        return Err(Error::InvalidInput(format!(
            "reference STFT {:?} does not match mel frames {} / bins {}",
            reference.dim(),
            m.n_frames(),
            m.frame.n_bins()
        )));
    }
    let fb = MelFilterbank::new(&m.frame, &m.mel, m.sample_rate)?;
    let plan = StftPlan::new(m.frame)?;
    let target = m.power();
    let floor = m.mel.log_floor;
    let ref_power = mel_power_frames(reference, &fb).mapv(|p| p.max(floor));
    let n_bins = fb.n_bins();
    let gains = parallel::map_indexed(m.n_frames(), |f| {
        let mut num = vec![0.0; n_bins];
        let mut den = vec![0.0; n_bins];
        fb.apply_transpose(&target.row(f).to_vec(), &mut num);
        fb.apply_transpose(&ref_power.row(f).to_vec(), &mut den);
        let mut g: Vec<Option<f64>> = num
            .iter()
            .zip(&den)
            .map(|(a, b)| (*b > 0.0).then(|| (a / b).sqrt().min(max_gain)))
            .collect();
        fill_nearest(&mut g);
        g.into_iter().map(|v| v.unwrap_or(0.0)).collect::<Vec<f64>>()
    });
    let mut shaped = reference.clone();
    for (f, g) in gains.iter().enumerate() {
        for (c, gk) in shaped.row_mut(f).iter_mut().zip(g) {
            *c *= *gk;
        }
    }
    Waveform::new(plan.inverse(&shaped, len), m.sample_rate)
}

/// Bins outside every filter (DC, Nyquist, or beyond the band edges) take the gain
/// of the nearest covered bin.
fn fill_nearest(g: &mut [Option<f64>]) {
    let Some(first) = g.iter().position(Option::is_some) else {
        return;
    };
    let mut last = g[first];
    for v in g.iter_mut() {
        match v {
            Some(_) => last = *v,
            None => *v = last,
        }
    }
    let lead = g[first];
    g[..first].iter_mut().for_each(|v| *v = lead);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{mel_spectrogram, stft, FrameConfig, MelConfig};
    use crate::metrics::lsd;
    use std::f64::consts::PI;

    fn tone(freq: f64, n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| 0.3 * (2.0 * PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
        .unwrap()
    }

    fn roundtrip(m: &MelSpectrogram, iters: usize) -> MelSpectrogram {
        let w = mel_to_waveform(m, iters).unwrap();
        mel_spectrogram(&w, &m.frame, &m.mel).unwrap()
    }

    /// LSD over frames whose analysis window stays clear of the reflected margins
    /// (and of the windows overlapping them).
    fn interior_lsd(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
        let margin = a.frame.window_size / a.frame.hop_size + 1;
        let keep = a.n_frames() - 2 * margin;
        let cut = |m: &MelSpectrogram| {
            let v = m.values.slice(ndarray::s![margin..margin + keep, ..]).to_owned();
            MelSpectrogram::new(v, m.frame, m.mel, m.sample_rate).unwrap()
        };
        lsd(&cut(a), &cut(b)).unwrap()
    }

    #[test]
    fn nnls_matches_band_power() {
        let frame = FrameConfig::default();
        let mel = MelConfig::default();
        let m = mel_spectrogram(&tone(440.0, 8000), &frame, &mel).unwrap();
        let fb = MelFilterbank::new(&frame, &mel, 16000).unwrap();
        let target = m.power();
        let p = nnls_mel_to_power(&target, &fb);
        assert!(p.iter().all(|v| *v >= 0.0));
        let back = mel_power_frames(&p.mapv(|v| Complex64::new(v.sqrt(), 0.0)), &fb);
        let peak = target.iter().cloned().fold(0.0, f64::max);
        for (a, b) in back.iter().zip(target.iter()) {
            assert!((a - b).abs() <= 1e-3 * peak, "{a} vs {b}");
        }
    }

    #[test]
    fn tone_round_trip_is_close() {
        let m = mel_spectrogram(&tone(440.0, 16000), &FrameConfig::default(), &MelConfig::default())
            .unwrap();
        let back = roundtrip(&m, 32);
        let interior = interior_lsd(&back, &m);
        assert!(interior < 1.0, "interior LSD {interior}");
        let full = lsd(&back, &m).unwrap();
        assert!(full < 2.5, "LSD {full}");
    }

    #[test]
    fn silence_reconstructs_to_near_zero() {
        let w = Waveform::new(vec![0.0; 8000], 16000).unwrap();
        let m = mel_spectrogram(&w, &FrameConfig::default(), &MelConfig::default()).unwrap();
        let out = mel_to_waveform(&m, 8).unwrap();
        assert_eq!(out.len(), 50 * 160);
        assert!(out.rms() < 1e-3);
    }

    #[test]
    fn more_iterations_do_not_hurt() {
        let m = mel_spectrogram(&tone(523.0, 8000), &FrameConfig::default(), &MelConfig::default())
            .unwrap();
        let errs: Vec<f64> = [4, 8, 16, 32, 64]
            .iter()
            .map(|&k| lsd(&roundtrip(&m, k), &m).unwrap())
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] * 1.01, "{errs:?}");
        }
    }

    #[test]
    fn non_finite_mel_is_rejected() {
        let mut m = mel_spectrogram(&tone(440.0, 4000), &FrameConfig::default(), &MelConfig::default())
            .unwrap();
        m.values[[0, 0]] = f64::NAN;
        assert!(matches!(mel_to_waveform(&m, 4), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn guided_with_own_mel_is_identity() {
        let w = tone(700.0, 8000);
        let frame = FrameConfig::default();
        let m = mel_spectrogram(&w, &frame, &MelConfig::default()).unwrap();
        let s = stft(&w, &frame).unwrap();
        let out = guided_inversion(&m, &s, w.len(), 10.0).unwrap();
        let err = out
            .samples()
            .iter()
            .zip(w.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }
}
