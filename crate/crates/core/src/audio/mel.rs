use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stft::{FrameConfig, StftPlan};
use super::Waveform;
use crate::error::{Error, Result};
use crate::parallel;

/// Mel band layout, log compression and affine normalization.
///
/// Normalized values are `norm_scale * (ln(max(power, log_floor)) + norm_shift)`.
/// Bands use the HTK mel scale with unnormalized triangular filters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper band edge in Hz; `None` means Nyquist.
    pub f_max: Option<f64>,
    pub log_floor: f64,
    pub norm_scale: f64,
    pub norm_shift: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-5,
            norm_scale: 1.0,
            norm_shift: 0.0,
        }
    }
}

impl MelConfig {
    pub fn f_max_for(&self, sample_rate: u32) -> f64 {
        self.f_max.unwrap_or(sample_rate as f64 / 2.0)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let f_max = self.f_max_for(sample_rate);
        if !(0.0 <= self.f_min && self.f_min < f_max && f_max <= nyquist) {
            return Err(Error::Config(format!(
                "mel band edges must satisfy 0 <= f_min ({}) < f_max ({f_max}) <= {nyquist}",
                self.f_min
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        if !(self.norm_scale.is_finite() && self.norm_scale != 0.0 && self.norm_shift.is_finite())
        {
            return Err(Error::Config("normalization must be finite with non-zero scale".into()));
        }
        Ok(())
    }

    /// Normalized value of a mel power.
    pub fn normalize_power(&self, power: f64) -> f64 {
        self.norm_scale * (power.max(self.log_floor).ln() + self.norm_shift)
    }

    /// Natural-log power of a normalized value.
    pub fn denormalize_log(&self, v: f64) -> f64 {
        v / self.norm_scale - self.norm_shift
    }

    /// Normalized value every floor-clamped entry takes.
    pub fn floor_value(&self) -> f64 {
        self.normalize_power(self.log_floor)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters stored as contiguous non-zero spans per band.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_bins: usize,
    spans: Vec<(usize, Vec<f64>)>,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(frame: &FrameConfig, mel: &MelConfig, sample_rate: u32) -> Result<Self> {
        frame.validate()?;
        mel.validate(sample_rate)?;
        let n_bins = frame.n_bins();
        let bin_hz = sample_rate as f64 / frame.window_size as f64;
        let lo = hz_to_mel(mel.f_min);
        let hi = hz_to_mel(mel.f_max_for(sample_rate));
        let edges: Vec<f64> = (0..mel.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mel.n_mels + 1) as f64))
            .collect();
        let mut spans = Vec::with_capacity(mel.n_mels);
        for b in 0..mel.n_mels {
            let (l, c, h) = (edges[b], edges[b + 1], edges[b + 2]);
            let weights: Vec<(usize, f64)> = (0..n_bins)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = ((f - l) / (c - l)).min((h - f) / (h - c));
                    (w > 0.0).then_some((k, w))
                })
                .collect();
            if weights.is_empty() {
                return Err(Error::Config(format!(
                    "mel band {b} ({l:.1}-{h:.1} Hz) covers no FFT bin; use fewer bands or a longer window"
                )));
            }
            let start = weights[0].0;
            let dense: Vec<f64> = {
                let end = weights.last().unwrap().0 + 1;
                let mut d = vec![0.0; end - start];
                for (k, w) in weights {
                    d[k - start] = w;
                }
                d
            };
            spans.push((start, dense));
        }
        Ok(Self {
            n_bins,
            spans,
            centers: edges[1..=mel.n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.spans.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers
    }

    /// Dense (n_mels × n_bins) matrix.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n_mels(), self.n_bins));
        for (b, (start, w)) in self.spans.iter().enumerate() {
            for (j, v) in w.iter().enumerate() {
                m[[b, start + j]] = *v;
            }
        }
        m
    }

    /// `out[b] = Σ_k F[b,k]·x[k]`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (start, w)) in out.iter_mut().zip(&self.spans) {
            *o = w.iter().zip(&x[*start..]).map(|(a, b)| a * b).sum();
        }
    }

    /// `out[k] = Σ_b F[b,k]·m[b]`.
    pub fn apply_transpose(&self, m: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (v, (start, w)) in m.iter().zip(&self.spans) {
            for (j, f) in w.iter().enumerate() {
                out[start + j] += f * v;
            }
        }
    }
}

/// Normalized log-mel matrix, frames × bands.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub frame: FrameConfig,
    pub mel: MelConfig,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(
        values: Array2<f64>,
        frame: FrameConfig,
        mel: MelConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        if values.ncols() != mel.n_mels {
            return Err(Error::InvalidInput(format!(
                "mel matrix has {} bands, config says {}",
                values.ncols(),
                mel.n_mels
            )));
        }
        if values.nrows() == 0 {
            return Err(Error::InvalidInput("mel matrix has no frames".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite mel value".into()));
        }
        Ok(Self {
            values,
            frame,
            mel,
            sample_rate,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }

    /// Linear mel power, undoing normalization and log.
    pub fn power(&self) -> Array2<f64> {
        self.values.mapv(|v| self.mel.denormalize_log(v).exp())
    }

    /// Log power in decibels.
    pub fn db(&self) -> Array2<f64> {
        let k = 10.0 / std::f64::consts::LN_10;
        self.values.mapv(|v| k * self.mel.denormalize_log(v))
    }
}

pub(crate) fn mel_power_frames(
    spec: &super::Spectrogram,
    fb: &MelFilterbank,
) -> Array2<f64> {
    let frames = spec.nrows();
    let rows = parallel::map_indexed(frames, |f| {
        let pow: Vec<f64> = spec.row(f).iter().map(|c| c.norm_sqr()).collect();
        let mut m = vec![0.0; fb.n_mels()];
        fb.apply(&pow, &mut m);
        m
    });
    Array2::from_shape_vec((frames, fb.n_mels()), rows.concat()).expect("rows are sized")
}

/// Log-mel spectrogram of a waveform.
pub fn mel_spectrogram(w: &Waveform, frame: &FrameConfig, mel: &MelConfig) -> Result<MelSpectrogram> {
    let fb = MelFilterbank::new(frame, mel, w.sample_rate())?;
    let spec = StftPlan::new(*frame)?.forward(w.samples())?;
    let power = mel_power_frames(&spec, &fb);
    Ok(MelSpectrogram {
        values: power.mapv(|p| mel.normalize_power(p)),
        frame: *frame,
        mel: *mel,
        sample_rate: w.sample_rate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, amp: f64, n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn filterbank_rows_are_valid() {
        let fb = MelFilterbank::new(&FrameConfig::default(), &MelConfig::default(), 16000).unwrap();
        let dense = fb.to_dense();
        assert_eq!(dense.dim(), (64, 513));
        for row in dense.rows() {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.sum() > 0.0);
        }
        assert!(fb.center_frequencies().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn transpose_matches_dense() {
        let fb = MelFilterbank::new(&FrameConfig::default(), &MelConfig::default(), 16000).unwrap();
        let dense = fb.to_dense();
        let m: Vec<f64> = (0..64).map(|i| (i as f64).cos()).collect();
        let mut out = vec![0.0; 513];
        fb.apply_transpose(&m, &mut out);
        let expect = dense.t().dot(&ndarray::Array1::from(m));
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_signal_hits_floor() {
        let cfg = MelConfig {
            norm_scale: 0.5,
            norm_shift: 3.0,
            ..Default::default()
        };
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let m = mel_spectrogram(&w, &FrameConfig::default(), &cfg).unwrap();
        assert_eq!(m.values.dim(), (101, 64));
        let expect = 0.5 * ((1e-5f64).ln() + 3.0);
        assert!(m.values.iter().all(|&v| v == expect));
    }

    #[test]
    fn doubling_amplitude_adds_log4() {
        let cfg = MelConfig {
            norm_scale: 0.25,
            ..Default::default()
        };
        let a = mel_spectrogram(&tone(440.0, 0.1, 8000), &FrameConfig::default(), &cfg).unwrap();
        let b = mel_spectrogram(&tone(440.0, 0.2, 8000), &FrameConfig::default(), &cfg).unwrap();
        let floor = cfg.floor_value();
        let mut checked = 0;
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            if *x > floor + 1e-9 {
                assert!((y - x - 0.25 * 4f64.ln()).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn deterministic() {
        let w = tone(300.0, 0.3, 5000);
        let a = mel_spectrogram(&w, &FrameConfig::default(), &MelConfig::default()).unwrap();
        let b = mel_spectrogram(&w, &FrameConfig::default(), &MelConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_band_edges_are_rejected() {
        let cfg = MelConfig {
            f_max: Some(9000.0),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(16000), Err(Error::Config(_))));
    }
}
