//! Convolutional VAE between normalized log-mel spectrograms and latent tensors.

mod train;

pub use train::{fit_latent_scale, load_mel_set, train_vae, VaeTrainConfig, VaeTrainReport};

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{FrameConfig, MelConfig, MelSpectrogram};
use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint::{fingerprint, Checkpoint};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, ParamStore, ResBlock};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    /// Latent channels `C`.
    pub latent_channels: usize,
    /// Spatial compression `r`, a power of two.
    pub compression: usize,
    /// Output channels of each down block (mirrored by the up blocks).
    pub block_channels: Vec<usize>,
    /// Residual blocks per level.
    pub res_blocks: usize,
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            compression: 4,
            block_channels: vec![32, 64, 128, 128],
            res_blocks: 1,
            kl_weight: 1e-4,
        }
    }
}

impl VaeConfig {
    /// The full-size architecture.
    pub fn full() -> Self {
        Self {
            block_channels: vec![128, 256, 512, 512],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be at least 1".into()));
        }
        if !self.compression.is_power_of_two() {
            return Err(Error::Config(format!("compression {} is not a power of two", self.compression)));
        }
        if self.strided_stages() > self.block_channels.len() {
            return Err(Error::Config(format!(
                "compression {} needs {} strided stages but only {} blocks exist",
                self.compression,
                self.strided_stages(),
                self.block_channels.len()
            )));
        }
        if self.block_channels.is_empty() || self.block_channels.contains(&0) || self.res_blocks == 0 {
            return Err(Error::Config("block channels and res_blocks must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.block_channels.len()
    }

    /// `log2(r)`.
    pub fn strided_stages(&self) -> usize {
        self.compression.trailing_zeros() as usize
    }

    /// Latent shape `(C, ⌈L/r⌉, F/r)` for an `L × F` mel.
    pub fn latent_shape(&self, frames: usize, n_mels: usize) -> (usize, usize, usize) {
        let r = self.compression;
        (self.latent_channels, frames.div_ceil(r), n_mels / r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LatentKind {
    Speech,
    Noise,
    Noisy,
    DiffusionState,
}

/// Latent `C × L' × F'` plus what is needed to decode it back to a mel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub values: Tensor,
    pub kind: LatentKind,
    /// Frame count of the source mel; decoding crops to it.
    pub frames: usize,
    pub frame: FrameConfig,
    pub mel: MelConfig,
    pub sample_rate: u32,
}

impl LatentTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    /// Same metadata, new values and kind.
    pub fn with_values(&self, values: Tensor, kind: LatentKind) -> Self {
        Self {
            values,
            kind,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Sample,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// L1 reconstruction plus `kl_weight` times the mean per-element KL divergence to N(0, I).
pub fn vae_loss(m: &[f64], m_hat: &[f64], mean: &[f64], logvar: &[f64], kl_weight: f64) -> Result<VaeLossParts> {
    if m.len() != m_hat.len() || mean.len() != logvar.len() || m.is_empty() || mean.is_empty() {
        return Err(Error::InvalidInput("vae_loss: mismatched or empty inputs".into()));
    }
    for (name, xs) in [("mel", m), ("reconstruction", m_hat), ("posterior mean", mean), ("posterior logvar", logvar)] {
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("vae_loss", format!("non-finite {name}")));
        }
    }
    let recon = m.iter().zip(m_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / m.len() as f64;
    let kl = 0.5
        * mean
            .iter()
            .zip(logvar)
            .map(|(mu, lv)| lv.exp() + mu * mu - 1.0 - lv)
            .sum::<f64>()
        / mean.len() as f64;
    Ok(VaeLossParts {
        total: recon + kl_weight * kl,
        recon,
        kl,
    })
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<ResBlock>,
    resample: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct Net {
    enc_in: Conv2d,
    enc_levels: Vec<Level>,
    enc_mid: ResBlock,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: ResBlock,
    dec_levels: Vec<Level>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
}

impl Net {
    fn new(cfg: &VaeConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let ch = &cfg.block_channels;
        let n = ch.len();
        let stages = cfg.strided_stages();
        let enc_in = Conv2d::new(store, "enc.in", 1, ch[0], 3, 1, rng);
        let mut prev = ch[0];
        let mut enc_levels = Vec::with_capacity(n);
        for (i, &c) in ch.iter().enumerate() {
            let blocks = (0..cfg.res_blocks)
                .map(|j| {
                    let b = ResBlock::new(store, &format!("enc.{i}.res{j}"), prev, c, None, rng);
                    prev = c;
                    b
                })
                .collect();
            let resample = (i < stages).then(|| Conv2d::new(store, &format!("enc.{i}.down"), c, c, 3, 2, rng));
            enc_levels.push(Level { blocks, resample });
        }
        let top = ch[n - 1];
        let enc_mid = ResBlock::new(store, "enc.mid", top, top, None, rng);
        let enc_norm = GroupNorm::new(store, "enc.norm", top);
        let enc_out = Conv2d::new(store, "enc.out", top, 2 * cfg.latent_channels, 3, 1, rng);

        let dec_in = Conv2d::new(store, "dec.in", cfg.latent_channels, top, 3, 1, rng);
        let dec_mid = ResBlock::new(store, "dec.mid", top, top, None, rng);
        let mut prev = top;
        let mut dec_levels = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let c = ch[i];
            let blocks = (0..cfg.res_blocks)
                .map(|j| {
                    let b = ResBlock::new(store, &format!("dec.{i}.res{j}"), prev, c, None, rng);
                    prev = c;
                    b
                })
                .collect();
            let resample =
                (i >= 1 && i <= stages).then(|| Conv2d::new(store, &format!("dec.{i}.up"), c, c, 3, 1, rng));
            dec_levels.push(Level { blocks, resample });
        }
        let dec_norm = GroupNorm::new(store, "dec.norm", ch[0]);
        let dec_out = Conv2d::new(store, "dec.out", ch[0], 1, 3, 1, rng);
        Self {
            enc_in,
            enc_levels,
            enc_mid,
            enc_norm,
            enc_out,
            dec_in,
            dec_mid,
            dec_levels,
            dec_norm,
            dec_out,
        }
    }
}

/// Encoder/decoder parameters plus the latent scale applied at the public boundary.
#[derive(Debug, Clone)]
pub struct Vae {
    cfg: VaeConfig,
    params: ParamStore,
    net: Net,
    /// Public latents are `scale · posterior`; chosen after training for unit variance.
    pub latent_scale: f64,
}

pub const VAE_CHECKPOINT_KIND: &str = "vae";

impl Vae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = Net::new(&cfg, &mut params, &mut rng);
        Ok(Self {
            cfg,
            params,
            net,
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Fingerprint of the architecture; checkpoints refuse to load into another one.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.cfg)
    }

    /// Posterior `(mean, logvar)` of a `(B, 1, L, F)` batch, each `(B, C, L/r, F/r)`.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> (Var, Var) {
        let n = &self.net;
        let mut h = n.enc_in.forward(g, p, x);
        for level in &n.enc_levels {
            for b in &level.blocks {
                h = b.forward(g, p, h, None);
            }
            if let Some(d) = &level.resample {
                h = d.forward(g, p, h);
            }
        }
        h = n.enc_mid.forward(g, p, h, None);
        h = n.enc_norm.forward(g, p, h);
        h = g.silu(h);
        let out = n.enc_out.forward(g, p, h);
        let c = self.cfg.latent_channels;
        let mean = g.narrow(out, 1, 0, c);
        let logvar = g.narrow(out, 1, c, c);
        let logvar = g.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
        (mean, logvar)
    }

    /// Decoded `(B, 1, r·L', r·F')` batch from unscaled latents.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        let n = &self.net;
        let mut h = n.dec_in.forward(g, p, z);
        h = n.dec_mid.forward(g, p, h, None);
        for level in &n.dec_levels {
            for b in &level.blocks {
                h = b.forward(g, p, h, None);
            }
            if let Some(u) = &level.resample {
                h = g.upsample2x(h);
                h = u.forward(g, p, h);
            }
        }
        h = n.dec_norm.forward(g, p, h);
        h = g.silu(h);
        n.dec_out.forward(g, p, h)
    }

    /// Training objective on a `(B, 1, L, F)` batch with reparameterization noise `xi`.
    /// Returns `(total, recon, kl)`.
    pub fn loss_graph(&self, g: &mut Graph, p: &Bound, x: Var, xi: Var) -> (Var, Var, Var) {
        let (mean, logvar) = self.encode_graph(g, p, x);
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let noise = g.mul(std, xi);
        let z = g.add(mean, noise);
        let x_hat = self.decode_graph(g, p, z);
        let recon = g.l1(x_hat, x);
        let ev = g.exp(logvar);
        let m2 = g.square(mean);
        let s = g.add(ev, m2);
        let s = g.sub(s, logvar);
        let s = g.add_scalar(s, -1.0);
        let kl = g.mean(s);
        let kl = g.scale(kl, 0.5);
        let weighted = g.scale(kl, self.cfg.kl_weight);
        let total = g.add(recon, weighted);
        (total, recon, kl)
    }

    fn check_mel(&self, m: &MelSpectrogram) -> Result<()> {
        if !m.n_mels().is_multiple_of(self.cfg.compression) {
            return Err(Error::Config(format!(
                "{} mel bands not divisible by compression {}",
                m.n_mels(),
                self.cfg.compression
            )));
        }
        Ok(())
    }

    /// `(B, 1, L_pad, F)` input tensor, padding time by repeating the last frame.
    pub fn mel_batch(&self, mels: &[&Array2<f64>]) -> Result<Tensor> {
        let (frames, f) = mels[0].dim();
        if mels.iter().any(|m| m.dim() != (frames, f)) {
            return Err(Error::Config("mel batch has mixed shapes".into()));
        }
        let padded = frames.div_ceil(self.cfg.compression) * self.cfg.compression;
        let mut data = Vec::with_capacity(mels.len() * padded * f);
        for m in mels {
            for t in 0..padded {
                data.extend(m.row(t.min(frames - 1)).iter());
            }
        }
        Ok(Tensor::new(vec![mels.len(), 1, padded, f], data))
    }

    /// Latents (posterior mean or a sample) of equally shaped mels.
    pub fn encode_batch(
        &self,
        mels: &[&MelSpectrogram],
        mode: EncodeMode,
        kind: LatentKind,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<LatentTensor>> {
        if mels.is_empty() {
            return Ok(Vec::new());
        }
        for m in mels {
            self.check_mel(m)?;
        }
        let values: Vec<&Array2<f64>> = mels.iter().map(|m| &m.values).collect();
        let x = self.mel_batch(&values)?;
        let mut g = Graph::no_grad();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.input(x);
        let (mean, logvar) = self.encode_graph(&mut g, &p, xv);
        let shape = g.shape(mean).to_vec();
        let per = shape[1] * shape[2] * shape[3];
        let mut z = g.value(mean).data().to_vec();
        if mode == EncodeMode::Sample {
            for (zv, lv) in z.iter_mut().zip(g.value(logvar).data()) {
                let xi: f64 = StandardNormal.sample(rng);
                *zv += (0.5 * lv).exp() * xi;
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("vae encode", "non-finite latent"));
        }
        Ok(z.chunks(per)
            .zip(mels)
            .map(|(c, m)| LatentTensor {
                values: Tensor::new(shape[1..].to_vec(), c.iter().map(|v| v * self.latent_scale).collect()),
                kind,
                frames: m.n_frames(),
                frame: m.frame,
                mel: m.mel,
                sample_rate: m.sample_rate,
            })
            .collect())
    }

    pub fn encode(&self, m: &MelSpectrogram, mode: EncodeMode, kind: LatentKind, rng: &mut dyn RngCore) -> Result<LatentTensor> {
        Ok(self.encode_batch(&[m], mode, kind, rng)?.remove(0))
    }

    /// Mels from equally shaped latents, each cropped to its source frame count.
    pub fn decode_batch(&self, zs: &[&LatentTensor]) -> Result<Vec<MelSpectrogram>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let shape = zs[0].values.shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.latent_channels {
            return Err(Error::Config(format!(
                "latent shape {shape:?} does not match {} latent channels",
                self.cfg.latent_channels
            )));
        }
        if zs.iter().any(|z| z.values.shape() != shape.as_slice()) {
            return Err(Error::Config("latent batch has mixed shapes".into()));
        }
        let mut data = Vec::with_capacity(zs.len() * zs[0].values.len());
        for z in zs {
            data.extend(z.values.data().iter().map(|v| v / self.latent_scale));
        }
        let mut g = Graph::no_grad();
        let p = self.params.bind_frozen(&mut g);
        let zv = g.input(Tensor::new(vec![zs.len(), shape[0], shape[1], shape[2]], data));
        let out = self.decode_graph(&mut g, &p, zv);
        let os = g.shape(out).to_vec();
        let (lp, f) = (os[2], os[3]);
        let vals = g.value(out).data();
        zs.iter()
            .enumerate()
            .map(|(i, z)| {
                let frames = z.frames.min(lp);
                let chunk = &vals[i * lp * f..(i * lp + frames) * f];
                if chunk.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric("vae decode", "non-finite mel"));
                }
                let arr = Array2::from_shape_vec((frames, f), chunk.to_vec()).expect("sized");
                let mel = MelConfig { n_mels: f, ..z.mel };
                MelSpectrogram::new(arr, z.frame, mel, z.sample_rate)
            })
            .collect()
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<MelSpectrogram> {
        Ok(self.decode_batch(&[z])?.remove(0))
    }

    pub fn to_checkpoint(&self, step: u64, train_config: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            VAE_CHECKPOINT_KIND,
            &self.fingerprint(),
            step,
            serde_json::json!({ "vae": self.cfg, "train": train_config }),
        )
        .with_section("params", self.params.entries().to_vec());
        ck.extra = serde_json::json!({ "latent_scale": self.latent_scale, "param_hash": self.params.hash() });
        ck
    }

    /// Rebuilds a VAE from a checkpoint, checking that it matches `expected` unless `force`.
    pub fn from_checkpoint(mut ck: Checkpoint, expected: Option<&VaeConfig>, force: bool) -> Result<Self> {
        if ck.kind != VAE_CHECKPOINT_KIND {
            return Err(Error::Config(format!("expected a vae checkpoint, found {}", ck.kind)));
        }
        let cfg: VaeConfig = serde_json::from_value(ck.config["vae"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad vae config in checkpoint: {e}")))?;
        if let Some(exp) = expected {
            if fingerprint(exp) != ck.fingerprint && !force {
                return Err(Error::Config(format!(
                    "vae checkpoint fingerprint {} does not match configured architecture {}; pass --force to load anyway",
                    ck.fingerprint,
                    fingerprint(exp)
                )));
            }
        }
        let mut vae = Vae::new(cfg, 0)?;
        vae.params.load(ck.take_section("params")?)?;
        vae.latent_scale = ck.extra["latent_scale"].as_f64().unwrap_or(1.0);
        Ok(vae)
    }
}
