//! Inference: noisy waveform to enhanced speech (or the estimated background noise).

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{guided_inversion, mel_spectrogram, stft, FrameConfig, GriffinLim, MelConfig, MelSpectrogram, Waveform};
use crate::autograd::Tensor;
use crate::checkpoint::{file_hash, resolve_pointer, Checkpoint};
use crate::data::{derive_seed, resample, InstructionId};
use crate::dcl::Cldm;
use crate::denoiser::reflect_pad;
use crate::diffusion::{respace, reverse_step};
use crate::error::{Error, Result};
use crate::vae::{EncodeMode, LatentKind, LatentTensor, Vae};

/// How decoded mels are turned back into waveforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Inversion {
    /// Per-bin gains on the noisy input's STFT, clamped to `max_gain`.
    Guided { max_gain: f64 },
    GriffinLim { iters: usize },
}

impl Default for Inversion {
    fn default() -> Self {
        Inversion::Guided { max_gain: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    /// Reverse steps `K`.
    pub steps: usize,
    pub seed: u64,
    pub instruction: InstructionId,
    pub use_ema: bool,
    pub inversion: Inversion,
    pub chunk_seconds: f64,
    pub crossfade_seconds: f64,
    /// Clamp the implied clean-latent estimate to `±clip` before each reverse step.
    pub clip_denoised: Option<f64>,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            seed: 0,
            instruction: InstructionId::InstructA,
            use_ema: true,
            inversion: Inversion::default(),
            chunk_seconds: 10.0,
            crossfade_seconds: 0.5,
            clip_denoised: None,
        }
    }
}

/// Mel front end the models were trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontEnd {
    pub sample_rate: u32,
    pub frame: FrameConfig,
    /// Normalized mel configuration of the training corpus.
    pub mel: MelConfig,
}

/// Frozen VAE and cLDM with the front end they expect.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub vae: Vae,
    pub cldm: Cldm,
    pub front_end: FrontEnd,
}

/// Where a loaded pipeline came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSource {
    pub cldm_path: PathBuf,
    pub cldm_hash: String,
    pub vae_path: PathBuf,
    pub vae_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub audio_seconds: f64,
    pub wall_seconds: f64,
    pub rtf: f64,
    pub steps: usize,
    pub hardware: String,
}

pub fn hardware_note() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mode = match crate::parallel::exec_mode() {
        crate::parallel::ExecMode::Parallel => "parallel",
        crate::parallel::ExecMode::Sequential => "sequential",
    };
    format!("{} {}, {threads} hardware threads, {mode} kernels", std::env::consts::ARCH, std::env::consts::OS)
}

/// Replaces `eps_hat` by the noise consistent with the clean estimate
/// `x0 = (z − √(1−ᾱ)·ε̂)/√ᾱ` clamped to `±clip`. Leaves `eps_hat` unchanged when no
/// element of `x0` exceeds the bound.
pub fn clip_noise_estimate(z: &[f64], eps_hat: &mut [f64], alpha_bar: f64, clip: f64) {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    if b == 0.0 {
        return;
    }
    for (zi, e) in z.iter().zip(eps_hat.iter_mut()) {
        let x0 = (zi - b * *e) / a;
        if x0.abs() > clip {
            *e = (zi - a * x0.clamp(-clip, clip)) / b;
        }
    }
}

/// `[start, end)` chunk bounds covering `len` samples with `overlap` shared samples.
pub fn chunk_bounds(len: usize, chunk: usize, overlap: usize) -> Vec<(usize, usize)> {
    if len <= chunk || chunk <= overlap {
        return vec![(0, len)];
    }
    let hop = chunk - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + chunk).min(len);
        out.push((start, end));
        if end == len {
            break;
        }
        start += hop;
    }
    out
}

/// Overlap-adds chunks with linear crossfades over the shared regions.
fn crossfade(parts: &[((usize, usize), Vec<f64>)], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut weight = vec![0.0; len];
    for (i, ((s, e), x)) in parts.iter().enumerate() {
        let fade_in = if i > 0 { parts[i - 1].0 .1.saturating_sub(*s) } else { 0 };
        let fade_out = parts.get(i + 1).map_or(0, |n| e.saturating_sub(n.0 .0));
        let n = e - s;
        for k in 0..n {
            let mut w = 1.0;
            if k < fade_in {
                w *= (k as f64 + 0.5) / fade_in as f64;
            }
            if k >= n - fade_out {
                w *= (n - k) as f64 - 0.5;
                w /= fade_out as f64;
            }
            out[s + k] += w * x[k];
            weight[s + k] += w;
        }
    }
    out.iter().zip(&weight).map(|(v, w)| if *w > 0.0 { v / w } else { 0.0 }).collect()
}

impl Pipeline {
    /// Loads a cLDM checkpoint (or `best.ckpt` pointer) together with its VAE. The VAE
    /// path and front end are taken from the checkpoint unless `vae` overrides the path;
    /// the VAE file must hash to the value recorded at training time unless `force`.
    pub fn load(cldm: &Path, vae: Option<&Path>, force: bool) -> Result<(Self, PipelineSource)> {
        let cldm_path = resolve_pointer(cldm)?;
        let ck = Checkpoint::read(&cldm_path)?;
        let train = ck.config.get("train").cloned().unwrap_or_default();
        let run = train.get("run").cloned().unwrap_or_default();
        let vae_path = match vae {
            Some(p) => p.to_path_buf(),
            None => run
                .get("vae_path")
                .and_then(|v| v.as_str())
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config(format!("{} does not record its VAE; pass --vae", cldm_path.display())))?,
        };
        let vae_hash = file_hash(&vae_path)?;
        let recorded = train.get("vae_hash").and_then(|v| v.as_str()).unwrap_or("");
        if !recorded.is_empty() && recorded != vae_hash && !force {
            return Err(Error::Config(format!(
                "{} has hash {vae_hash}, but the cLDM was trained against {recorded}; pass --force to use it anyway",
                vae_path.display()
            )));
        }
        let vae_ck = Checkpoint::read(&vae_path)?;
        let front = run
            .get("front_end")
            .or_else(|| vae_ck.config.get("train").and_then(|t| t.get("front_end")))
            .cloned()
            .ok_or_else(|| Error::Config("neither checkpoint records the mel front end".into()))?;
        let front_end: FrontEnd = serde_json::from_value(front).map_err(|e| Error::Checkpoint(format!("front end: {e}")))?;
        let pipeline = Pipeline::new(Vae::from_checkpoint(vae_ck, None, force)?, Cldm::from_checkpoint(ck)?, front_end)?;
        let source = PipelineSource {
            cldm_hash: file_hash(&cldm_path)?,
            cldm_path,
            vae_path,
            vae_hash,
        };
        Ok((pipeline, source))
    }

    pub fn new(vae: Vae, cldm: Cldm, front_end: FrontEnd) -> Result<Self> {
        if cldm.model.config().out_channels != vae.config().latent_channels {
            return Err(Error::Config(format!(
                "denoiser predicts {} channels but the VAE has {} latent channels",
                cldm.model.config().out_channels,
                vae.config().latent_channels
            )));
        }
        Ok(Self { vae, cldm, front_end })
    }

    fn check(&self, w: &Waveform, cfg: &EnhanceConfig) -> Result<()> {
        if w.is_empty() {
            return Err(Error::InvalidInput("empty input".into()));
        }
        if cfg.steps == 0 || cfg.steps > self.cldm.schedule.len() {
            return Err(Error::Domain(format!(
                "{} reverse steps outside 1..={}",
                cfg.steps,
                self.cldm.schedule.len()
            )));
        }
        Ok(())
    }

    pub fn mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        mel_spectrogram(w, &self.front_end.frame, &self.front_end.mel)
    }

    /// Runs the reverse process from seeded Gaussian noise conditioned on `z_y`.
    pub fn sample_latent(&self, z_y: &LatentTensor, cfg: &EnhanceConfig, seed: u64) -> Result<LatentTensor> {
        let s = respace(&self.cldm.schedule, cfg.steps)?;
        let (c, h, w) = z_y.shape();
        let k = self.cldm.model.config().divisor();
        let (hp, wp) = (h.next_multiple_of(k), w.next_multiple_of(k));
        let cond = reflect_pad(&z_y.values, hp, wp)?.reshaped(&[1, c, hp, wp]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Tensor::randn(&[1, c, hp, wp], 1.0, &mut rng);
        let params = self.cldm.params(cfg.use_ema);
        for step in (1..=s.len()).rev() {
            let t = s.original_t(step)?;
            let mut eps = self.cldm.model.predict_batch(params, &z, &cond, &[cfg.instruction], &[t])?;
            if let Some(clip) = cfg.clip_denoised {
                clip_noise_estimate(z.data(), eps.data_mut(), s.alpha_bar(step)?, clip);
            }
            let next = reverse_step(z.data(), eps.data(), step, &s, &mut rng)?;
            z = Tensor::new(vec![1, c, hp, wp], next);
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for i in 0..h {
                let row = (ci * hp + i) * wp;
                out.extend_from_slice(&z.data()[row..row + w]);
            }
        }
        let kind = match cfg.instruction {
            InstructionId::InstructA => LatentKind::Speech,
            InstructionId::InstructB => LatentKind::Noise,
        };
        Ok(z_y.with_values(Tensor::new(vec![c, h, w], out), kind))
    }

    /// Generated mel for one chunk.
    pub fn generate_mel(&self, w: &Waveform, cfg: &EnhanceConfig, seed: u64) -> Result<MelSpectrogram> {
        let mel = self.mel(w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z_y = self.vae.encode(&mel, EncodeMode::Mean, LatentKind::Noisy, &mut rng)?;
        let z = self.sample_latent(&z_y, cfg, seed)?;
        self.vae.decode(&z)
    }

    fn invert(&self, m: &MelSpectrogram, w: &Waveform, cfg: &EnhanceConfig) -> Result<Waveform> {
        match cfg.inversion {
            Inversion::Guided { max_gain } => {
                let spec = stft(w, &self.front_end.frame)?;
                guided_inversion(m, &spec, w.len(), max_gain)
            }
            Inversion::GriffinLim { iters } => {
                let g = GriffinLim {
                    iters,
                    ..Default::default()
                }
                .reconstruct(m)?;
                let mut x = g.into_samples();
                x.resize(w.len(), 0.0);
                Waveform::new(x, w.sample_rate())
            }
        }
    }

    /// Waveform generated under `cfg.instruction`, with the sample rate and length of the
    /// input. Inputs at another rate are resampled to the model rate and back. Long
    /// inputs are processed in chunks joined by linear crossfades.
    pub fn run(&self, w: &Waveform, cfg: &EnhanceConfig) -> Result<Waveform> {
        self.check(w, cfg)?;
        if w.sample_rate() != self.front_end.sample_rate {
            let native = self.run(&resample(w, self.front_end.sample_rate)?, cfg)?;
            let mut out = resample(&native, w.sample_rate())?.into_samples();
            out.resize(w.len(), 0.0);
            return Waveform::new(out, w.sample_rate());
        }
        let sr = w.sample_rate() as f64;
        let chunk = (cfg.chunk_seconds * sr).round() as usize;
        let overlap = (cfg.crossfade_seconds * sr).round() as usize;
        let bounds = chunk_bounds(w.len(), chunk.max(1), overlap);
        let mut parts = Vec::with_capacity(bounds.len());
        for (i, &(s, e)) in bounds.iter().enumerate() {
            let piece = w.slice(s, e);
            let mel = self.generate_mel(&piece, cfg, derive_seed(cfg.seed, "chunk", i as u64))?;
            let out = self.invert(&mel, &piece, cfg)?;
            parts.push(((s, e), out.into_samples()));
        }
        if parts.len() == 1 {
            return Waveform::new(parts.remove(0).1, w.sample_rate());
        }
        Waveform::new(crossfade(&parts, w.len()), w.sample_rate())
    }

    /// Enhanced speech (instruction A regardless of `cfg.instruction`).
    pub fn enhance(&self, w: &Waveform, cfg: &EnhanceConfig) -> Result<Waveform> {
        self.run(
            w,
            &EnhanceConfig {
                instruction: InstructionId::InstructA,
                ..cfg.clone()
            },
        )
    }

    /// Estimated background noise (instruction B).
    pub fn estimate_noise(&self, w: &Waveform, cfg: &EnhanceConfig) -> Result<Waveform> {
        self.run(
            w,
            &EnhanceConfig {
                instruction: InstructionId::InstructB,
                ..cfg.clone()
            },
        )
    }

    /// Real-time factors per step count: one discarded warm-up run, then the median
    /// wall time of `runs` (at least 3) timed runs.
    pub fn measure_rtf(&self, w: &Waveform, steps: &[usize], runs: usize, cfg: &EnhanceConfig) -> Result<Vec<RtfReport>> {
        let runs = runs.max(3);
        let audio = w.duration_s();
        if let Some(&k) = steps.first() {
            self.enhance(w, &EnhanceConfig { steps: k, ..cfg.clone() })?;
        }
        steps
            .iter()
            .map(|&k| {
                let c = EnhanceConfig { steps: k, ..cfg.clone() };
                let times = (0..runs)
                    .map(|_| {
                        let t0 = Instant::now();
                        self.enhance(w, &c)?;
                        Ok(t0.elapsed().as_secs_f64())
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let wall = crate::metrics::median(&times);
                Ok(RtfReport {
                    audio_seconds: audio,
                    wall_seconds: wall,
                    rtf: wall / audio,
                    steps: k,
                    hardware: hardware_note(),
                })
            })
            .collect()
    }
}
