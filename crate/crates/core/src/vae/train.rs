use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncodeMode, LatentKind, Vae, VaeConfig};
use crate::audio::wav::read_wav;
use crate::audio::{mel_spectrogram, MelSpectrogram};
use crate::autograd::{Graph, Tensor};
use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Random time crop per item; rounded down to a multiple of the compression.
    pub crop_frames: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Dev evaluation interval; step 0 is always evaluated.
    pub eval_every: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            crop_frames: 64,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            seed: 0,
            checkpoint_every: 500,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeTrainReport {
    /// `(step, total, recon)` for every training step.
    pub train_loss: Vec<(u64, f64, f64)>,
    /// `(step, dev total loss)` at each evaluation.
    pub dev_loss: Vec<(u64, f64)>,
    pub best_step: u64,
    pub best_dev_loss: f64,
    pub latent_scale: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Mels of every distinct audio file referenced by a manifest (noisy, clean and noise).
pub fn load_mel_set(m: &Manifest) -> Result<Vec<MelSpectrogram>> {
    let mut paths = BTreeSet::new();
    for e in &m.entries {
        for p in [&e.noisy_path, &e.clean_path, &e.noise_path, &e.target_path] {
            paths.insert(p.clone());
        }
    }
    let paths: Vec<String> = paths.into_iter().collect();
    crate::parallel::map_slice(&paths, |p| {
        let w = read_wav(&m.resolve(p))?;
        mel_spectrogram(&w, &m.header.frame, &m.header.mel)
    })
    .into_iter()
    .collect()
}

fn crop_batch<R: Rng + ?Sized>(vae: &Vae, mels: &[MelSpectrogram], n: usize, crop: usize, rng: &mut R) -> Result<Tensor> {
    let crops: Vec<_> = (0..n)
        .map(|_| {
            let m = &mels[rng.random_range(0..mels.len())];
            let frames = m.n_frames();
            let len = crop.min(frames);
            let start = rng.random_range(0..=frames - len);
            m.values.slice(s![start..start + len, ..]).to_owned()
        })
        .collect();
    let len = crops.iter().map(|c| c.nrows()).min().unwrap_or(0);
    let trimmed: Vec<_> = crops.iter().map(|c| c.slice(s![..len, ..]).to_owned()).collect();
    vae.mel_batch(&trimmed.iter().collect::<Vec<_>>())
}

/// Deterministic dev loss: posterior mean as the latent (no reparameterization noise).
fn dev_loss(vae: &Vae, params: &ParamStore, dev: &[MelSpectrogram]) -> Result<f64> {
    let losses = crate::parallel::map_slice(dev, |m| -> Result<f64> {
        let x = vae.mel_batch(&[&m.values])?;
        let mut g = Graph::no_grad();
        let p = params.bind_frozen(&mut g);
        let xv = g.input(x);
        let (c, l, f) = vae.config().latent_shape(m.n_frames(), m.n_mels());
        let xi = g.input(Tensor::zeros(&[1, c, l, f]));
        let (total, _, _) = vae.loss_graph(&mut g, &p, xv, xi);
        Ok(g.value(total).item())
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(crate::metrics::mean(&losses))
}

/// `1 / std` of the posterior means over `mels`, so that public latents have unit variance.
pub fn fit_latent_scale(vae: &Vae, mels: &[MelSpectrogram]) -> Result<f64> {
    let mut unscaled = vae.clone();
    unscaled.latent_scale = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut vals = Vec::new();
    for m in mels {
        let z = unscaled.encode(m, EncodeMode::Mean, LatentKind::Speech, &mut rng)?;
        vals.extend_from_slice(z.values.data());
    }
    let mu = crate::metrics::mean(&vals);
    let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len().max(1) as f64;
    if !(var > 1e-12) {
        return Ok(1.0);
    }
    Ok(1.0 / var.sqrt())
}

/// Trains a VAE on `train` mels, keeping the parameters with the lowest dev loss.
///
/// With `out_dir`, writes `vae_step{N}.ckpt` every `checkpoint_every` steps, a JSONL
/// log `vae_log.jsonl`, and the selected model as `vae.ckpt`.
pub fn train_vae(
    vae_cfg: &VaeConfig,
    cfg: &VaeTrainConfig,
    train: &[MelSpectrogram],
    dev: &[MelSpectrogram],
    out_dir: Option<&Path>,
) -> Result<(Vae, VaeTrainReport)> {
    if train.is_empty() {
        return Err(Error::InvalidInput("no training mels".into()));
    }
    if cfg.batch_size == 0 || cfg.crop_frames == 0 {
        return Err(Error::Config("batch_size and crop_frames must be positive".into()));
    }
    let mut vae = Vae::new(vae_cfg.clone(), cfg.seed)?;
    let r = vae_cfg.compression;
    let crop = (cfg.crop_frames / r).max(1) * r;
    let dev_set = if dev.is_empty() { train } else { dev };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5641_4554);
    let mut opt = AdamW::new(cfg.optimizer, vae.params());
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("vae_log.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let cfg_json = serde_json::to_value(cfg).expect("config serializes");
    let started = Instant::now();

    let mut report = VaeTrainReport {
        train_loss: Vec::with_capacity(cfg.steps as usize),
        dev_loss: Vec::new(),
        best_step: 0,
        best_dev_loss: f64::INFINITY,
        latent_scale: 1.0,
        checkpoint: None,
    };
    let mut best = vae.params().clone();
    let mut last_good: Option<PathBuf> = None;

    for step in 0..=cfg.steps {
        let eval_now = step == 0 || step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if eval_now {
            let d = dev_loss(&vae, vae.params(), dev_set)?;
            report.dev_loss.push((step, d));
            if d < report.best_dev_loss {
                report.best_dev_loss = d;
                report.best_step = step;
                best = vae.params().clone();
            }
            log::info!("vae step {step}: dev loss {d:.5}");
        }
        if step == cfg.steps {
            break;
        }
        let x = crop_batch(&vae, train, cfg.batch_size, crop, &mut rng)?;
        let xs = x.shape();
        let (c, l, f) = vae_cfg.latent_shape(xs[2], xs[3]);
        let xi = Tensor::randn(&[xs[0], c, l, f], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = vae.params().bind(&mut g);
        let xv = g.input(x);
        let xiv = g.input(xi);
        let (total, recon, _) = vae.loss_graph(&mut g, &p, xv, xiv);
        let loss = g.value(total).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, last_good });
        }
        let recon = g.value(recon).item();
        let mut grads = g.backward(total);
        let grads = vae.params().collect_grads(&p, &mut grads);
        let lr = cfg.optimizer.lr;
        opt.step(vae.params_mut(), &grads, lr);
        report.train_loss.push((step, loss, recon));
        if let Some((f, path)) = log.as_mut() {
            let rec = serde_json::json!({
                "step": step, "loss": loss, "recon": recon, "lr": lr,
                "wall_time": started.elapsed().as_secs_f64(),
            });
            writeln!(f, "{rec}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let p = d.join(format!("vae_step{}.ckpt", step + 1));
                vae.to_checkpoint(step + 1, cfg_json.clone()).write(&p)?;
                last_good = Some(p);
            }
        }
    }

    vae.params_mut().load(best.entries().to_vec())?;
    vae.latent_scale = fit_latent_scale(&vae, train)?;
    report.latent_scale = vae.latent_scale;
    if let Some(d) = out_dir {
        let p = d.join("vae.ckpt");
        vae.to_checkpoint(report.best_step, cfg_json).write(&p)?;
        report.checkpoint = Some(p);
    }
    Ok((vae, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{FrameConfig, MelConfig};
    use ndarray::Array2;

    fn mels(n: usize) -> Vec<MelSpectrogram> {
        (0..n)
            .map(|k| {
                let v = Array2::from_shape_fn((24, 8), |(i, j)| ((i as f64 * 0.3 + k as f64) * (j + 1) as f64 * 0.2).sin());
                let cfg = MelConfig {
                    n_mels: 8,
                    ..Default::default()
                };
                MelSpectrogram::new(v, FrameConfig::default(), cfg, 16000).unwrap()
            })
            .collect()
    }

    fn tiny() -> VaeConfig {
        VaeConfig {
            latent_channels: 2,
            compression: 2,
            block_channels: vec![8, 8],
            res_blocks: 1,
            kl_weight: 1e-4,
        }
    }

    #[test]
    fn short_run_improves_and_selects_best() {
        let data = mels(4);
        let cfg = VaeTrainConfig {
            steps: 60,
            batch_size: 2,
            crop_frames: 16,
            eval_every: 20,
            checkpoint_every: 30,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (vae, rep) = train_vae(&tiny(), &cfg, &data, &data, Some(dir.path())).unwrap();
        assert!(rep.best_dev_loss <= rep.dev_loss[0].1);
        assert!(rep.best_dev_loss < rep.dev_loss[0].1, "{:?}", rep.dev_loss);
        assert!(dir.path().join("vae_step30.ckpt").exists());
        let ck = crate::checkpoint::Checkpoint::read(&dir.path().join("vae.ckpt")).unwrap();
        let back = Vae::from_checkpoint(ck, Some(&tiny()), false).unwrap();
        assert_eq!(back.params().hash(), vae.params().hash());
        assert!(rep.latent_scale.is_finite() && rep.latent_scale > 0.0);
        let lines = std::fs::read_to_string(dir.path().join("vae_log.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 60);
    }

    #[test]
    fn training_is_reproducible() {
        let data = mels(2);
        let cfg = VaeTrainConfig {
            steps: 5,
            batch_size: 2,
            crop_frames: 8,
            ..Default::default()
        };
        let a = train_vae(&tiny(), &cfg, &data, &[], None).unwrap().0;
        let b = train_vae(&tiny(), &cfg, &data, &[], None).unwrap().0;
        assert_eq!(a.params().hash(), b.params().hash());
    }

    #[test]
    fn divergence_is_reported() {
        let data = mels(2);
        let cfg = VaeTrainConfig {
            steps: 3,
            batch_size: 1,
            crop_frames: 8,
            optimizer: AdamWConfig {
                lr: f64::NAN,
                ..AdamWConfig::default()
            },
            ..Default::default()
        };
        let err = train_vae(&tiny(), &cfg, &data, &[], None).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, .. }), "{err}");
    }
}
