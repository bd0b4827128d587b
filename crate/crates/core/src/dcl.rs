//! Dual-context training of the conditional latent diffusion model.
//!
//! Every step draws one context (SPEECH with probability `speech_fraction`, NOISE
//! otherwise), sets the diffusion target to the clean speech or the noise of the drawn
//! pairs, and minimizes the weighted noise-prediction loss.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{mel_spectrogram, FrameConfig};
use crate::audio::wav::read_wav;
use crate::autograd::{Graph, Tensor};
use crate::checkpoint::{fingerprint, write_atomic, Checkpoint};
use crate::data::{InstructionId, Manifest, PairSampler, TargetKind, TrainingPair};
use crate::denoiser::{Denoiser, DenoiserConfig, OutputHead, CLDM_CHECKPOINT_KIND};
use crate::diffusion::{forward_sample, DiffusionSchedule, LossMode, LossWeights, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, AdamW, AdamWConfig, Ema, LinearDecay, ParamStore};
use crate::vae::{EncodeMode, LatentKind, LatentTensor, Vae};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Base learning rate and AdamW moments; the rate decays linearly to zero.
    pub optimizer: AdamWConfig,
    pub speech_fraction: f64,
    /// Training segment length; longer clips are randomly cropped to it.
    pub segment_seconds: f64,
    /// Zero disables periodic checkpoints (step 0 and the final step are always written).
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub loss_mode: LossMode,
    /// Per-step weights `γ_t`; see [`TrainConfig::weights`] for the default.
    pub loss_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 2000,
            optimizer: AdamWConfig::default(),
            speech_fraction: 0.75,
            segment_seconds: 10.0,
            checkpoint_every: 500,
            eval_every: 100,
            seed: 0,
            ema_decay: 0.999,
            grad_clip: 1.0,
            loss_mode: LossMode::Squared,
            loss_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) || !(self.segment_seconds > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr, segment_seconds and grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} must lie in [0, 1)", self.ema_decay)));
        }
        if !(0.0..=1.0).contains(&self.speech_fraction) {
            return Err(Error::Config(format!("speech_fraction {} must lie in [0, 1]", self.speech_fraction)));
        }
        Ok(())
    }

    /// Explicit weights if given; otherwise uniform for an epsilon head and
    /// `max(1, (1 - ᾱ_t)/ᾱ_t)` for a velocity head: the noise error where the signal
    /// dominates, the clean-latent error where the noise does.
    pub fn weights(&self, schedule: &DiffusionSchedule, head: OutputHead) -> Result<LossWeights> {
        let steps = schedule.len();
        match &self.loss_weights {
            None if head == OutputHead::Epsilon => Ok(LossWeights::uniform(steps)),
            None => LossWeights::new(schedule.alpha_bars().iter().map(|ab| ((1.0 - ab) / ab).max(1.0)).collect()),
            Some(g) if g.len() == steps => LossWeights::new(g.clone()),
            Some(g) => Err(Error::Config(format!("{} loss weights for {steps} steps", g.len()))),
        }
    }
}

/// Posterior-mean latents of every noisy and target file, computed once with the frozen VAE.
#[derive(Debug, Clone, Default)]
pub struct LatentCache {
    latents: HashMap<String, LatentTensor>,
}

impl LatentCache {
    pub fn build(manifests: &[&Manifest], vae: &Vae) -> Result<Self> {
        let mut jobs: Vec<(String, PathBuf, LatentKind, String, &Manifest)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for m in manifests {
            for p in &m.entries {
                let target_kind = match p.target_kind {
                    TargetKind::Speech => LatentKind::Speech,
                    TargetKind::Noise => LatentKind::Noise,
                };
                for (rel, kind) in [(&p.noisy_path, LatentKind::Noisy), (&p.target_path, target_kind)] {
                    let path = m.resolve(rel);
                    let key = path.to_string_lossy().into_owned();
                    if seen.insert(key.clone()) {
                        jobs.push((key, path, kind, p.id.clone(), *m));
                    }
                }
            }
        }
        let encoded = crate::parallel::map_slice(&jobs, |(key, path, kind, id, m)| -> Result<(String, LatentTensor)> {
            let w = read_wav(path)?;
            let mel = mel_spectrogram(&w, &m.header.frame, &m.header.mel)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let z = vae
                .encode(&mel, EncodeMode::Mean, *kind, &mut rng)
                .map_err(|e| Error::Config(format!("pair {id}: {e}")))?;
            Ok((key.clone(), z))
        });
        let latents = encoded.into_iter().collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { latents })
    }

    pub fn get(&self, m: &Manifest, rel: &str) -> Result<&LatentTensor> {
        let key = m.resolve(rel).to_string_lossy().into_owned();
        self.latents
            .get(&key)
            .ok_or_else(|| Error::InvalidInput(format!("no cached latent for {key}")))
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// One training batch, every tensor `(B, C, L', F')`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub z0: Tensor,
    pub z_y: Tensor,
    pub instr: Vec<InstructionId>,
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub z_t: Tensor,
}

/// Latent crop length (in latent frames) for a segment, a multiple of `divisor`.
pub fn segment_latent_frames(seconds: f64, frame: &FrameConfig, sample_rate: u32, compression: usize, divisor: usize) -> usize {
    let samples = (seconds * sample_rate as f64).round() as usize;
    let latent = frame.n_frames(samples).div_ceil(compression);
    (latent / divisor).max(1) * divisor
}

fn crop_time(z: &Tensor, start: usize, len: usize) -> Tensor {
    let s = z.shape();
    let (c, l, f) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(c * len * f);
    for ci in 0..c {
        let base = (ci * l + start) * f;
        data.extend_from_slice(&z.data()[base..base + len * f]);
    }
    Tensor::new(vec![c, len, f], data)
}

/// Assembles a batch: conditions and targets from the cache, `t` uniform on `1..=T` per
/// item, standard normal `eps`, and `z_t` from the forward marginal. Items longer than
/// `segment` latent frames are cropped at a random offset shared by condition and target.
pub fn prepare_batch<R: Rng + ?Sized>(
    pairs: &[&TrainingPair],
    manifest: &Manifest,
    cache: &LatentCache,
    segment: usize,
    s: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut shape: Option<Vec<usize>> = None;
    let (mut z0, mut z_y, mut eps, mut z_t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut instr = Vec::with_capacity(pairs.len());
    let mut ts = Vec::with_capacity(pairs.len());
    for p in pairs {
        p.check()?;
        let y = cache.get(manifest, &p.noisy_path)?;
        let x = cache.get(manifest, &p.target_path)?;
        if x.values.shape() != y.values.shape() {
            return Err(Error::Config(format!("pair {}: condition and target latents differ in shape", p.id)));
        }
        let l = y.values.shape()[1];
        let len = segment.min(l);
        let start = if l > len { rng.random_range(0..=l - len) } else { 0 };
        let (yc, xc) = (crop_time(&y.values, start, len), crop_time(&x.values, start, len));
        match &shape {
            None => shape = Some(yc.shape().to_vec()),
            Some(sh) if sh.as_slice() != yc.shape() => {
                return Err(Error::Config(format!(
                    "pair {}: latent shape {:?} differs from batch shape {sh:?}",
                    p.id,
                    yc.shape()
                )))
            }
            _ => {}
        }
        let t = rng.random_range(1..=s.len());
        let e = Tensor::randn(yc.shape(), 1.0, rng);
        let zt = forward_sample(xc.data(), t, e.data(), s)?;
        z0.extend_from_slice(xc.data());
        z_y.extend_from_slice(yc.data());
        eps.extend_from_slice(e.data());
        z_t.extend(zt);
        instr.push(p.instruction);
        ts.push(t);
    }
    let sh = shape.expect("non-empty batch");
    let full = vec![pairs.len(), sh[0], sh[1], sh[2]];
    Ok(Batch {
        z0: Tensor::new(full.clone(), z0),
        z_y: Tensor::new(full.clone(), z_y),
        instr,
        t: ts,
        eps: Tensor::new(full.clone(), eps),
        z_t: Tensor::new(full, z_t),
    })
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Denoiser,
    pub optimizer: AdamW,
    pub ema: Ema,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub best_dev: f64,
}

impl TrainState {
    pub fn new(model: Denoiser, cfg: &TrainConfig) -> Self {
        let optimizer = AdamW::new(cfg.optimizer, model.params());
        let ema = Ema::new(cfg.ema_decay, model.params());
        Self {
            model,
            optimizer,
            ema,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            best_dev: f64::INFINITY,
        }
    }

    pub fn ema_params(&self) -> ParamStore {
        self.ema.apply_to(self.model.params())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr: f64,
}

/// Batch loss under `params` without gradients.
pub fn batch_loss(
    model: &Denoiser,
    params: &ParamStore,
    batch: &Batch,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<f64> {
    let w = batch.t.iter().map(|&t| weights.get(t)).collect::<Result<Vec<_>>>()?;
    let eps_hat = model.predict_batch(params, &batch.z_t, &batch.z_y, &batch.instr, &batch.t)?;
    let per = batch.eps.len() / batch.t.len();
    let mut total = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let sl = i * per..(i + 1) * per;
        let mse = batch.eps.data()[sl.clone()]
            .iter()
            .zip(&eps_hat.data()[sl])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / per as f64;
        total += wi
            * match mode {
                LossMode::Squared => mse,
                LossMode::Unsquared => mse.sqrt(),
            };
    }
    Ok(total / w.len() as f64)
}

/// One optimizer update on the batch loss, followed by the EMA update.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<StepStats> {
    let w = batch.t.iter().map(|&t| weights.get(t)).collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let p = state.model.params().bind(&mut g);
    let zt = g.input(batch.z_t.clone());
    let zy = g.input(batch.z_y.clone());
    let eps = g.input(batch.eps.clone());
    let out = state.model.forward(&mut g, &p, zt, zy, &batch.instr, &batch.t);
    let loss = match cfg.loss_mode {
        LossMode::Squared => g.weighted_mse(out, eps, &w),
        LossMode::Unsquared => g.weighted_rms(out, eps, &w),
    };
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::numeric("train_step", format!("non-finite loss at step {}", state.step)));
    }
    let mut grads = g.backward(loss);
    let mut grads = state.model.params().collect_grads(&p, &mut grads);
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    let clipped = grad_norm > cfg.grad_clip;
    if clipped {
        log::debug!("step {}: gradient norm {grad_norm:.3} clipped to {}", state.step, cfg.grad_clip);
    }
    let lr = LinearDecay {
        base: cfg.optimizer.lr,
        total: cfg.steps,
    }
    .lr(state.step);
    state.optimizer.step(state.model.params_mut(), &grads, lr);
    state.ema.update(state.model.params(), state.step);
    state.step += 1;
    Ok(StepStats {
        loss: value,
        grad_norm,
        clipped,
        lr,
    })
}

/// Trained denoiser, its EMA weights and the schedule it was trained under.
#[derive(Debug, Clone)]
pub struct Cldm {
    pub model: Denoiser,
    pub ema: ParamStore,
    pub schedule_config: ScheduleConfig,
    pub schedule: DiffusionSchedule,
    pub step: u64,
}

/// Fingerprint of the architecture and schedule a cLDM checkpoint belongs to.
pub fn cldm_fingerprint(model: &DenoiserConfig, schedule: &ScheduleConfig) -> String {
    fingerprint(&serde_json::json!({ "denoiser": model, "schedule": schedule }))
}

impl Cldm {
    pub fn params(&self, use_ema: bool) -> &ParamStore {
        if use_ema {
            &self.ema
        } else {
            self.model.params()
        }
    }

    pub fn to_checkpoint(&self, train: &serde_json::Value, extra: serde_json::Value) -> Checkpoint {
        let cfg = self.model.config();
        let mut ck = Checkpoint::new(
            CLDM_CHECKPOINT_KIND,
            &cldm_fingerprint(cfg, &self.schedule_config),
            self.step,
            serde_json::json!({ "denoiser": cfg, "schedule": self.schedule_config, "train": train }),
        )
        .with_section("params", self.model.params().entries().to_vec())
        .with_section("ema", self.ema.entries().to_vec());
        ck.extra = extra;
        ck
    }

    /// Loads a cLDM checkpoint (following a `best.ckpt` pointer), verifying the expected
    /// fingerprint unless `force`.
    pub fn load(path: &Path, expected: Option<(&DenoiserConfig, &ScheduleConfig)>, force: bool) -> Result<Self> {
        let path = crate::checkpoint::resolve_pointer(path)?;
        let fp = expected.map(|(d, s)| cldm_fingerprint(d, s));
        let ck = Checkpoint::read_expecting(&path, CLDM_CHECKPOINT_KIND, fp.as_deref(), force)?;
        Self::from_checkpoint(ck)
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        if ck.kind != CLDM_CHECKPOINT_KIND {
            return Err(Error::Config(format!("expected a cldm checkpoint, found {}", ck.kind)));
        }
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("cldm config: {e}"));
        let dcfg: DenoiserConfig = serde_json::from_value(ck.config["denoiser"].clone()).map_err(bad)?;
        let scfg: ScheduleConfig = serde_json::from_value(ck.config["schedule"].clone()).map_err(bad)?;
        let schedule = scfg.build()?;
        let mut model = Denoiser::new(dcfg, 0)?;
        model.set_schedule(&schedule)?;
        model.params_mut().load(ck.take_section("params")?)?;
        let mut ema = model.params().clone();
        ema.load(ck.take_section("ema")?)?;
        Ok(Self {
            model,
            ema,
            schedule,
            schedule_config: scfg,
            step: ck.step,
        })
    }
}

/// Dev loss per context under fixed timesteps and noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevLoss {
    pub speech: Option<f64>,
    pub noise: Option<f64>,
}

impl DevLoss {
    /// Mean over the contexts present.
    pub fn combined(&self) -> f64 {
        let v: Vec<f64> = [self.speech, self.noise].into_iter().flatten().collect();
        if v.is_empty() {
            f64::INFINITY
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Evaluates the dev loss for each context with a seed-fixed draw of `t` and noise, so
/// that successive evaluations are comparable.
pub fn dev_loss(
    model: &Denoiser,
    params: &ParamStore,
    dev: &Manifest,
    cache: &LatentCache,
    segment: usize,
    s: &DiffusionSchedule,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<DevLoss> {
    let mut out = DevLoss {
        speech: None,
        noise: None,
    };
    for kind in [TargetKind::Speech, TargetKind::Noise] {
        let pairs: Vec<&TrainingPair> = dev.pairs_of(kind).collect();
        if pairs.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xDE5);
        let mut losses = Vec::new();
        for chunk in pairs.chunks(8) {
            let b = prepare_batch(chunk, dev, cache, segment, s, &mut rng)?;
            losses.push(batch_loss(model, params, &b, weights, mode)? * chunk.len() as f64);
        }
        let v = losses.iter().sum::<f64>() / pairs.len() as f64;
        match kind {
            TargetKind::Speech => out.speech = Some(v),
            TargetKind::Noise => out.noise = Some(v),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub context: TargetKind,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DevRecord {
    pub step: u64,
    pub dev_loss_speech: Option<f64>,
    pub dev_loss_noise: Option<f64>,
    pub combined: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub dev: Vec<DevRecord>,
    pub best_step: u64,
    /// Best checkpoint path, when an output directory was given.
    pub best_checkpoint: Option<PathBuf>,
    pub model: Cldm,
}

fn write_checkpoint(
    dir: &Path,
    state: &TrainState,
    schedule_cfg: &ScheduleConfig,
    schedule: &DiffusionSchedule,
    train: &serde_json::Value,
    extra: serde_json::Value,
) -> Result<PathBuf> {
    let cldm = Cldm {
        model: state.model.clone(),
        ema: state.ema_params(),
        schedule_config: *schedule_cfg,
        schedule: schedule.clone(),
        step: state.step,
    };
    let path = dir.join(format!("cldm_step{}.ckpt", state.step));
    cldm.to_checkpoint(train, extra).write(&path)?;
    Ok(path)
}

/// Inputs of a training run beyond the configuration.
pub struct TrainInputs<'a> {
    pub train: &'a Manifest,
    pub dev: &'a Manifest,
    pub vae: &'a Vae,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// Recorded in checkpoints to tie them to the frozen VAE.
    pub vae_hash: String,
    /// Stored verbatim in every checkpoint (front end, VAE location, run configuration).
    pub run: serde_json::Value,
}

/// Full training loop: periodic dev evaluation with EMA weights, JSONL logs
/// (`train_log.jsonl`, `dev_log.jsonl`), `cldm_step{N}.ckpt` checkpoints and a
/// `best.ckpt` pointer to the one with the lowest combined dev loss.
pub fn run_training(inputs: &TrainInputs<'_>, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.dev.entries.is_empty() {
        return Err(Error::Config("dev split is empty".into()));
    }
    let schedule = inputs.schedule.build()?;
    let weights = cfg.weights(&schedule, inputs.model.head)?;
    let sampler = PairSampler::new(inputs.train, cfg.speech_fraction)?;
    let cache = LatentCache::build(&[inputs.train, inputs.dev], inputs.vae)?;
    let hdr = &inputs.train.header;
    let segment = segment_latent_frames(
        cfg.segment_seconds,
        &hdr.frame,
        hdr.sample_rate,
        inputs.vae.config().compression,
        inputs.model.divisor(),
    );
    let mut model = Denoiser::new(inputs.model.clone(), cfg.seed)?;
    model.set_schedule(&schedule)?;
    let mut state = TrainState::new(model, cfg);
    let train_json = serde_json::json!({ "train": cfg, "vae_hash": inputs.vae_hash, "run": inputs.run });

    let mut logs = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let open = |name: &str| -> Result<(File, PathBuf)> {
                let p = d.join(name);
                Ok((File::create(&p).map_err(|e| Error::io(&p, e))?, p))
            };
            Some((open("train_log.jsonl")?, open("dev_log.jsonl")?))
        }
        None => None,
    };
    let started = Instant::now();
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let mut devs = Vec::new();
    let mut best_step = 0;
    let mut best_ema = state.ema_params();
    let mut best_path = None;
    let mut last_good: Option<PathBuf> = None;

    loop {
        let step = state.step;
        let eval_now = step == 0 || step == cfg.steps || (cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every));
        if eval_now {
            let ema = state.ema_params();
            let d = dev_loss(&state.model, &ema, inputs.dev, &cache, segment, &schedule, &weights, cfg.loss_mode)?;
            let rec = DevRecord {
                step,
                dev_loss_speech: d.speech,
                dev_loss_noise: d.noise,
                combined: d.combined(),
            };
            log::info!("step {step}: dev loss speech {:?} noise {:?}", d.speech, d.noise);
            let improved = rec.combined < state.best_dev;
            if improved {
                state.best_dev = rec.combined;
                best_step = step;
                best_ema = ema;
            }
            if let Some((_, (f, p))) = logs.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(|e| Error::io(p.as_path(), e))?;
            }
            devs.push(rec);
            let periodic = cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every);
            if let Some(d) = out_dir {
                if improved || periodic || step == cfg.steps {
                    let extra = serde_json::json!({ "dev": devs.last(), "best_dev": state.best_dev });
                    let path = write_checkpoint(d, &state, &inputs.schedule, &schedule, &train_json, extra)?;
                    if improved {
                        let name = path.file_name().expect("file name").to_string_lossy().into_owned();
                        write_atomic(&d.join("best.ckpt"), format!("{name}\n").as_bytes())?;
                        best_path = Some(path.clone());
                    }
                    last_good = Some(path);
                }
            }
        }
        if step == cfg.steps {
            break;
        }
        let (kind, pairs) = sampler.draw_batch(cfg.batch_size, &mut state.rng);
        let mut rng = state.rng.clone();
        let batch = prepare_batch(&pairs, inputs.train, &cache, segment, &schedule, &mut rng)?;
        state.rng = rng;
        debug_assert!(batch.instr.iter().all(|i| i.target_kind() == kind));
        let stats = match train_step(&mut state, &batch, cfg, &weights) {
            Ok(s) => s,
            Err(Error::Numeric { .. }) => return Err(Error::Diverged { step, last_good }),
            Err(e) => return Err(e),
        };
        let rec = TrainRecord {
            step,
            loss: stats.loss,
            context: kind,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
            wall_time: started.elapsed().as_secs_f64(),
        };
        if let Some(((f, p), _)) = logs.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(|e| Error::io(p.as_path(), e))?;
        }
        records.push(rec);
    }

    let model = Cldm {
        model: state.model.clone(),
        ema: best_ema,
        schedule_config: inputs.schedule,
        schedule,
        step: best_step,
    };
    Ok(TrainOutcome {
        records,
        dev: devs,
        best_step,
        best_checkpoint: best_path,
        model,
    })
}
