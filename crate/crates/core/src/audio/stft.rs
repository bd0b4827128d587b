use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::parallel;

/// One-sided complex spectrogram, frames × (window_size/2 + 1).
pub type Spectrogram = Array2<Complex64>;

/// Framing parameters. The analysis window is always a periodic Hann window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub window_size: usize,
    pub hop_size: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            window_size: 1024,
            hop_size: 160,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(Error::Config(format!(
                "hop size {} must be in 1..={}",
                self.hop_size, self.window_size
            )));
        }
        if self.window_size < 2 || !self.window_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window size {} must be even and at least 2",
                self.window_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Frame count under center padding: `1 + floor(len / hop)`.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop_size
    }

    /// Length of the signal synthesized from `frames` frames.
    pub fn synthesis_len(&self, frames: usize) -> usize {
        frames.saturating_sub(1) * self.hop_size
    }

    pub fn window(&self) -> Vec<f64> {
        hann(self.window_size)
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reflect index into `0..n` without repeating the edge sample, folding as often as needed.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

pub(crate) struct StftPlan {
    cfg: FrameConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub(crate) fn new(cfg: FrameConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.window_size),
            inverse: planner.plan_fft_inverse(cfg.window_size),
        })
    }

    pub(crate) fn window(&self) -> &[f64] {
        &self.window
    }

    /// One-sided spectrum of a single windowed frame of exactly `window_size` samples.
    pub(crate) fn frame_spectrum(&self, frame: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = frame
            .iter()
            .zip(&self.window)
            .map(|(s, w)| Complex64::new(s * w, 0.0))
            .collect();
        self.forward.process(&mut buf);
        buf.truncate(self.cfg.n_bins());
        buf
    }

    pub(crate) fn forward(&self, x: &[f64]) -> Result<Spectrogram> {
        if x.is_empty() {
            return Err(Error::InvalidInput("empty waveform".into()));
        }
        let n = self.cfg.window_size;
        let hop = self.cfg.hop_size;
        let frames = self.cfg.n_frames(x.len());
        let bins = self.cfg.n_bins();
        let half = (n / 2) as isize;
        let rows = parallel::map_indexed(frames, |f| {
            let start = (f * hop) as isize - half;
            let mut buf: Vec<Complex64> = (0..n)
                .map(|k| {
                    let s = x[reflect(start + k as isize, x.len())];
                    Complex64::new(s * self.window[k], 0.0)
                })
                .collect();
            self.forward.process(&mut buf);
            buf.truncate(bins);
            buf
        });
        let flat: Vec<Complex64> = rows.into_iter().flatten().collect();
        Ok(Array2::from_shape_vec((frames, bins), flat).expect("frame buffers are sized"))
    }

    /// Frames of an already padded signal: frame `f` covers `f·hop .. f·hop + window_size`.
    pub(crate) fn forward_padded(&self, x: &[f64], frames: usize) -> Spectrogram {
        let n = self.cfg.window_size;
        let hop = self.cfg.hop_size;
        let rows = parallel::map_indexed(frames, |f| self.frame_spectrum(&x[f * hop..f * hop + n]));
        let flat: Vec<Complex64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((frames, self.cfg.n_bins()), flat).expect("frame buffers are sized")
    }

    /// Weighted overlap-add over the padded time axis, `(frames-1)·hop + window_size` samples.
    pub(crate) fn overlap_add(&self, spec: &Spectrogram) -> Vec<f64> {
        let n = self.cfg.window_size;
        let hop = self.cfg.hop_size;
        let bins = self.cfg.n_bins();
        let frames = spec.nrows();
        let blocks = parallel::map_indexed(frames, |f| {
            let row = spec.row(f);
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            for k in 0..bins {
                buf[k] = row[k];
            }
            for k in 1..n - bins + 1 {
                buf[n - k] = row[k].conj();
            }
            self.inverse.process(&mut buf);
            buf.iter()
                .zip(&self.window)
                .map(|(c, w)| c.re / n as f64 * w)
                .collect::<Vec<f64>>()
        });
        let total = (frames.saturating_sub(1)) * hop + n;
        let mut out = vec![0.0; total];
        let mut norm = vec![0.0; total];
        for (f, block) in blocks.iter().enumerate() {
            let off = f * hop;
            for k in 0..n {
                out[off + k] += block[k];
                norm[off + k] += self.window[k] * self.window[k];
            }
        }
        out.iter()
            .zip(&norm)
            .map(|(o, w)| if *w > 1e-10 { o / w } else { 0.0 })
            .collect()
    }

    /// Weighted overlap-add inverse, trimmed to `len` samples of the original time axis.
    pub(crate) fn inverse(&self, spec: &Spectrogram, len: usize) -> Vec<f64> {
        let full = self.overlap_add(spec);
        let half = self.cfg.window_size / 2;
        (0..len).map(|i| full.get(i + half).copied().unwrap_or(0.0)).collect()
    }
}

/// Center-padded (reflect) short-time Fourier transform.
pub fn stft(w: &Waveform, cfg: &FrameConfig) -> Result<Spectrogram> {
    StftPlan::new(*cfg)?.forward(w.samples())
}

/// Inverse STFT by weighted overlap-add, returning `len` samples.
pub fn istft(spec: &Spectrogram, cfg: &FrameConfig, len: usize) -> Result<Vec<f64>> {
    if spec.ncols() != cfg.n_bins() {
        return Err(Error::InvalidInput(format!(
            "spectrogram has {} bins, expected {}",
            spec.ncols(),
            cfg.n_bins()
        )));
    }
    Ok(StftPlan::new(*cfg)?.inverse(spec, len))
}
