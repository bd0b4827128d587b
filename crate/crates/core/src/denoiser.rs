//! Conditional U-Net noise estimator over latent tensors.
//!
//! The noisy latent `z_t` and the condition `z_Y` are concatenated on the channel axis;
//! the timestep enters through a sinusoidal embedding projected into every residual
//! block, and the instruction embedding is attended to by every transformer block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint::fingerprint;
use crate::data::InstructionId;
use crate::diffusion::{DiffusionSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, Linear, ParamId, ParamStore, ResBlock, SpatialTransformer};
use crate::vae::{LatentKind, LatentTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// `2 · out_channels`: the noisy latent and the condition stacked.
    pub in_channels: usize,
    pub out_channels: usize,
    pub n_down_blocks: usize,
    pub n_up_blocks: usize,
    pub block_channels: Vec<usize>,
    /// Residual blocks per down level; up levels use one more.
    pub res_blocks: usize,
    pub attention_heads: usize,
    /// Width of the keys and values the instruction embedding is projected to.
    pub cross_attention_dim: usize,
    /// Instruction embedding size `d`.
    pub embed_dim: usize,
    pub timestep_embed_dim: usize,
    /// Levels `0..attention_levels` carry transformer blocks (the middle block always does).
    pub attention_levels: usize,
    /// Levels from this index on also use self-attention.
    pub self_attention_from_level: usize,
    pub head: OutputHead,
}

/// What the last convolution predicts. Either way the denoiser returns a noise estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// The convolution output is the noise estimate itself.
    Epsilon,
    /// The convolution predicts `v = √ᾱ_t·ε − √(1−ᾱ_t)·z0`, and the noise estimate is
    /// `√ᾱ_t·v̂ + √(1−ᾱ_t)·z_t`. Near `t = T` the estimate is then dominated by `z_t`
    /// and the network only has to get the clean latent right.
    #[default]
    Velocity,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 16,
            out_channels: 8,
            n_down_blocks: 4,
            n_up_blocks: 4,
            block_channels: vec![64, 128, 256, 256],
            res_blocks: 1,
            attention_heads: 4,
            cross_attention_dim: 128,
            embed_dim: 128,
            timestep_embed_dim: 256,
            attention_levels: 2,
            self_attention_from_level: 1,
            head: OutputHead::Velocity,
        }
    }
}

impl DenoiserConfig {
    pub fn full() -> Self {
        Self {
            block_channels: vec![320, 640, 1280, 1280],
            res_blocks: 2,
            attention_heads: 8,
            cross_attention_dim: 1024,
            embed_dim: 768,
            timestep_embed_dim: 1280,
            head: OutputHead::Epsilon,
            ..Self::default()
        }
    }

    /// Small network for fast overfitting runs and tests.
    pub fn micro() -> Self {
        Self {
            block_channels: vec![16, 32, 64, 64],
            attention_heads: 4,
            cross_attention_dim: 32,
            embed_dim: 32,
            timestep_embed_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.out_channels == 0 || self.in_channels != 2 * self.out_channels {
            return bad(format!(
                "in_channels {} must be twice out_channels {}",
                self.in_channels, self.out_channels
            ));
        }
        if self.n_down_blocks == 0 || self.block_channels.len() != self.n_down_blocks {
            return bad(format!(
                "{} block channels given for {} down blocks",
                self.block_channels.len(),
                self.n_down_blocks
            ));
        }
        if self.n_up_blocks != self.n_down_blocks {
            return bad("n_up_blocks must equal n_down_blocks".into());
        }
        if self.attention_heads == 0 {
            return bad("attention_heads must be positive".into());
        }
        if let Some(c) = self.block_channels.iter().find(|&&c| c == 0 || c % self.attention_heads != 0) {
            return bad(format!("block width {c} is not a positive multiple of {} heads", self.attention_heads));
        }
        if !self.block_channels[0].is_multiple_of(2) {
            return bad("first block width must be even for the sinusoidal embedding".into());
        }
        if self.res_blocks == 0 || self.cross_attention_dim == 0 || self.embed_dim == 0 || self.timestep_embed_dim == 0 {
            return bad("res_blocks and embedding sizes must be positive".into());
        }
        if self.attention_levels > self.n_down_blocks {
            return bad(format!("attention_levels {} exceeds {} levels", self.attention_levels, self.n_down_blocks));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.n_down_blocks - 1)
    }

    fn has_attention(&self, level: usize) -> bool {
        level < self.attention_levels
    }

    fn has_self_attention(&self, level: usize) -> bool {
        level >= self.self_attention_from_level
    }
}

/// Learnable parameter count of a configuration, computed without allocating it.
pub fn count_params(cfg: &DenoiserConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
    let lin = |i: usize, o: usize, bias: bool| i * o + if bias { o } else { 0 };
    let temb = cfg.timestep_embed_dim;
    let res = |i: usize, o: usize| {
        2 * i + conv(i, o, 3) + lin(temb, o, true) + 2 * o + conv(o, o, 3) + if i != o { conv(i, o, 1) } else { 0 }
    };
    let attn = |d: usize, ctx: usize| lin(d, d, false) + 2 * lin(ctx, d, false) + lin(d, d, true);
    let xf = |d: usize, self_attn: bool| {
        2 * d
            + lin(d, d, true)
            + if self_attn { 2 * d + attn(d, d) } else { 0 }
            + 2 * d
            + attn(d, cfg.cross_attention_dim)
            + 2 * d
            + lin(d, 4 * d, true)
            + lin(4 * d, d, true)
            + lin(d, d, true)
    };
    let ch = &cfg.block_channels;
    let n = ch.len();
    let mut total = 2 * cfg.embed_dim;
    if cfg.embed_dim != cfg.cross_attention_dim {
        total += lin(cfg.embed_dim, cfg.cross_attention_dim, true);
    }
    total += lin(ch[0], temb, true) + lin(temb, temb, true);
    total += conv(cfg.in_channels, ch[0], 3);
    let mut skips = vec![ch[0]];
    let mut prev = ch[0];
    for (i, &c) in ch.iter().enumerate() {
        for _ in 0..cfg.res_blocks {
            total += res(prev, c);
            if cfg.has_attention(i) {
                total += xf(c, cfg.has_self_attention(i));
            }
            prev = c;
            skips.push(c);
        }
        if i + 1 < n {
            total += conv(c, c, 3);
            skips.push(c);
        }
    }
    total += 2 * res(prev, prev) + xf(prev, true);
    for i in (0..n).rev() {
        let c = ch[i];
        for _ in 0..=cfg.res_blocks {
            let s = skips.pop().expect("skip available");
            total += res(prev + s, c);
            if cfg.has_attention(i) {
                total += xf(c, cfg.has_self_attention(i));
            }
            prev = c;
        }
        if i > 0 {
            total += conv(c, c, 3);
        }
    }
    total + 2 * ch[0] + conv(ch[0], cfg.out_channels, 3)
}

/// Sinusoidal features of each timestep, `(B, dim)`: cosines then sines.
pub fn timestep_features(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t * f).collect();
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(args.iter().map(|a| a.sin()));
    }
    Tensor::new(vec![ts.len(), dim], data)
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    attn: Option<SpatialTransformer>,
}

impl Stage {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, temb: Var, ctx: Var) -> Var {
        let h = self.res.forward(g, p, x, Some(temb));
        match &self.attn {
            Some(a) => a.forward(g, p, h, ctx),
            None => h,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: ParamStore,
    table: ParamId,
    context_proj: Option<Linear>,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<(Vec<Stage>, Option<Conv2d>)>,
    mid1: ResBlock,
    mid_attn: SpatialTransformer,
    mid2: ResBlock,
    up: Vec<(Vec<Stage>, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    alpha_bar: Vec<f64>,
}

pub const CLDM_CHECKPOINT_KIND: &str = "cldm";

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;
        let table = store.add(
            "instruction.table",
            Tensor::randn(&[2, d], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        let ctx = cfg.cross_attention_dim;
        let context_proj = (d != ctx).then(|| Linear::new(&mut store, "instruction.proj", d, ctx, true, &mut rng));
        let ch = cfg.block_channels.clone();
        let temb = cfg.timestep_embed_dim;
        let time1 = Linear::new(&mut store, "time.l1", ch[0], temb, true, &mut rng);
        let time2 = Linear::new(&mut store, "time.l2", temb, temb, true, &mut rng);
        let conv_in = Conv2d::new(&mut store, "conv_in", cfg.in_channels, ch[0], 3, 1, &mut rng);
        let heads = cfg.attention_heads;
        let n = ch.len();

        let stage = |store: &mut ParamStore, name: String, cin: usize, c: usize, level: usize, rng: &mut ChaCha8Rng| Stage {
            res: ResBlock::new(store, &format!("{name}.res"), cin, c, Some(temb), rng),
            attn: cfg.has_attention(level).then(|| {
                SpatialTransformer::new(store, &format!("{name}.attn"), c, ctx, heads, cfg.has_self_attention(level), rng)
            }),
        };

        let mut skips = vec![ch[0]];
        let mut prev = ch[0];
        let mut down = Vec::with_capacity(n);
        for (i, &c) in ch.iter().enumerate() {
            let mut stages = Vec::new();
            for j in 0..cfg.res_blocks {
                stages.push(stage(&mut store, format!("down.{i}.{j}"), prev, c, i, &mut rng));
                prev = c;
                skips.push(c);
            }
            let ds = (i + 1 < n).then(|| {
                skips.push(c);
                Conv2d::new(&mut store, &format!("down.{i}.downsample"), c, c, 3, 2, &mut rng)
            });
            down.push((stages, ds));
        }
        let mid1 = ResBlock::new(&mut store, "mid.res1", prev, prev, Some(temb), &mut rng);
        let mid_attn = SpatialTransformer::new(&mut store, "mid.attn", prev, ctx, heads, true, &mut rng);
        let mid2 = ResBlock::new(&mut store, "mid.res2", prev, prev, Some(temb), &mut rng);
        let mut up = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let c = ch[i];
            let mut stages = Vec::new();
            for j in 0..=cfg.res_blocks {
                let s = skips.pop().expect("skip available");
                stages.push(stage(&mut store, format!("up.{i}.{j}"), prev + s, c, i, &mut rng));
                prev = c;
            }
            let us = (i > 0).then(|| Conv2d::new(&mut store, &format!("up.{i}.upsample"), c, c, 3, 1, &mut rng));
            up.push((stages, us));
        }
        let norm_out = GroupNorm::new(&mut store, "norm_out", ch[0]);
        let conv_out = Conv2d::new(&mut store, "conv_out", ch[0], cfg.out_channels, 3, 1, &mut rng);
        // Residual branches start as the identity.
        let zeroed: Vec<bool> = store.entries().iter().map(|(n, _)| n.ends_with(".res.conv2.w") || n.ends_with(".res1.conv2.w") || n.ends_with(".res2.conv2.w")).collect();
        for (t, z) in store.tensors_mut().zip(zeroed) {
            if z {
                t.data_mut().fill(0.0);
            }
        }
        let alpha_bar = ScheduleConfig::default().build()?.alpha_bars().to_vec();
        Ok(Self {
            cfg,
            params: store,
            table,
            context_proj,
            time1,
            time2,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
            alpha_bar,
        })
    }

    /// Installs the `ᾱ` table the velocity head converts with. `new` uses the default schedule.
    pub fn set_schedule(&mut self, s: &DiffusionSchedule) -> Result<()> {
        if s.timestep_map().is_some() {
            return Err(Error::Config("the denoiser needs the unrespaced training schedule".into()));
        }
        self.alpha_bar = s.alpha_bars().to_vec();
        Ok(())
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.cfg)
    }

    /// The learned embedding row of an instruction.
    pub fn instruction_embedding(&self, instr: InstructionId) -> Vec<f64> {
        let d = self.cfg.embed_dim;
        let i = instr.index();
        self.params.get(self.table).data()[i * d..(i + 1) * d].to_vec()
    }

    /// Noise estimate for a `(B, C, H, W)` batch. Spatial sizes must already be divisible.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        z_t: Var,
        z_y: Var,
        instr: &[InstructionId],
        ts: &[usize],
    ) -> Var {
        let b = instr.len();
        let rows: Vec<usize> = instr.iter().map(|i| i.index()).collect();
        let mut ctx = g.gather(p.var(self.table), &rows);
        if let Some(proj) = &self.context_proj {
            ctx = proj.forward(g, p, ctx);
        }
        let ctx = g.reshape(ctx, &[b, 1, self.cfg.cross_attention_dim]);

        let tf = g.input(timestep_features(ts, self.cfg.block_channels[0]));
        let temb = self.time1.forward(g, p, tf);
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, p, temb);
        let temb = g.silu(temb);

        let x = g.concat(&[z_t, z_y], 1);
        let mut h = self.conv_in.forward(g, p, x);
        let mut skips = vec![h];
        for (stages, ds) in &self.down {
            for s in stages {
                h = s.forward(g, p, h, temb, ctx);
                skips.push(h);
            }
            if let Some(ds) = ds {
                h = ds.forward(g, p, h);
                skips.push(h);
            }
        }
        h = self.mid1.forward(g, p, h, Some(temb));
        h = self.mid_attn.forward(g, p, h, ctx);
        h = self.mid2.forward(g, p, h, Some(temb));
        for (stages, us) in &self.up {
            for s in stages {
                let skip = skips.pop().expect("skip available");
                let cat = g.concat(&[h, skip], 1);
                h = s.forward(g, p, cat, temb, ctx);
            }
            if let Some(us) = us {
                h = g.upsample2x(h);
                h = us.forward(g, p, h);
            }
        }
        h = self.norm_out.forward(g, p, h);
        h = g.silu(h);
        let out = self.conv_out.forward(g, p, h);
        match self.cfg.head {
            OutputHead::Epsilon => out,
            OutputHead::Velocity => {
                let shape = g.shape(z_t).to_vec();
                let per: usize = shape[1..].iter().product();
                let mut a = Vec::with_capacity(b * per);
                let mut s = Vec::with_capacity(b * per);
                for &t in ts {
                    let ab = self.alpha_bar[t - 1];
                    a.extend(std::iter::repeat_n(ab.sqrt(), per));
                    s.extend(std::iter::repeat_n((1.0 - ab).sqrt(), per));
                }
                let a = g.input(Tensor::new(shape.clone(), a));
                let s = g.input(Tensor::new(shape, s));
                let v = g.mul(out, a);
                let skip = g.mul(z_t, s);
                g.add(v, skip)
            }
        }
    }

    fn check_batch(&self, z_t: &Tensor, z_y: &Tensor, instr: &[InstructionId], ts: &[usize]) -> Result<()> {
        let s = z_t.shape();
        if s.len() != 4 || s[1] != self.cfg.out_channels {
            return Err(Error::Config(format!(
                "z_t shape {s:?} is not (B, {}, H, W)",
                self.cfg.out_channels
            )));
        }
        if z_y.shape() != s {
            return Err(Error::Config(format!("z_t shape {s:?} and z_Y shape {:?} differ", z_y.shape())));
        }
        if instr.len() != s[0] || ts.len() != s[0] {
            return Err(Error::Config(format!(
                "batch of {} latents has {} instructions and {} timesteps",
                s[0],
                instr.len(),
                ts.len()
            )));
        }
        if ts.contains(&0) {
            return Err(Error::Domain("timestep 0 has no noise to predict".into()));
        }
        if let Some(t) = ts.iter().find(|&&t| t > self.alpha_bar.len()) {
            return Err(Error::Domain(format!("timestep {t} is past the {}-step schedule", self.alpha_bar.len())));
        }
        let k = self.cfg.divisor();
        let (h, w) = (s[2], s[3]);
        if h % k != 0 || w % k != 0 {
            return Err(Error::Config(format!(
                "latent size {h}x{w} must be divisible by {k}; pad by {}x{} (reflect) or use the padded predictor",
                h.next_multiple_of(k) - h,
                w.next_multiple_of(k) - w
            )));
        }
        Ok(())
    }

    /// Batched noise prediction with the given parameters (raw or EMA).
    pub fn predict_batch(
        &self,
        params: &ParamStore,
        z_t: &Tensor,
        z_y: &Tensor,
        instr: &[InstructionId],
        ts: &[usize],
    ) -> Result<Tensor> {
        self.check_batch(z_t, z_y, instr, ts)?;
        let mut g = Graph::no_grad();
        let p = params.bind_frozen(&mut g);
        let a = g.input(z_t.clone());
        let b = g.input(z_y.clone());
        let out = self.forward(&mut g, &p, a, b, instr, ts);
        let out = g.value(out).clone();
        if !out.all_finite() {
            return Err(Error::numeric("denoiser", "non-finite noise estimate"));
        }
        Ok(out)
    }

    /// Noise estimate for one latent. Spatial sizes must be divisible by [`DenoiserConfig::divisor`].
    pub fn predict_noise(
        &self,
        params: &ParamStore,
        z_t: &LatentTensor,
        z_y: &LatentTensor,
        instr: InstructionId,
        t: usize,
    ) -> Result<Tensor> {
        let (c, h, w) = z_t.shape();
        let a = z_t.values.clone().reshaped(&[1, c, h, w]);
        let b = z_y.values.clone().reshaped(&[1, c, z_y.shape().1, z_y.shape().2]);
        Ok(self.predict_batch(params, &a, &b, &[instr], &[t])?.reshaped(&[c, h, w]))
    }

    /// As [`Denoiser::predict_noise`] but reflect-pads indivisible latents and crops the result.
    pub fn predict_noise_padded(
        &self,
        params: &ParamStore,
        z_t: &LatentTensor,
        z_y: &LatentTensor,
        instr: InstructionId,
        t: usize,
    ) -> Result<Tensor> {
        if z_t.shape() != z_y.shape() {
            return Err(Error::Config(format!(
                "z_t shape {:?} and z_Y shape {:?} differ",
                z_t.shape(),
                z_y.shape()
            )));
        }
        let (_, h, w) = z_t.shape();
        let k = self.cfg.divisor();
        let (hp, wp) = (h.next_multiple_of(k), w.next_multiple_of(k));
        if (hp, wp) == (h, w) {
            return self.predict_noise(params, z_t, z_y, instr, t);
        }
        let pad = |z: &LatentTensor| reflect_pad(&z.values, hp, wp).map(|v| z.with_values(v, z.kind));
        let out = self.predict_noise(params, &pad(z_t)?, &pad(z_y)?, instr, t)?;
        Ok(crop(&out, h, w))
    }

    /// Reverse-process state as a latent with the condition's metadata.
    pub fn as_state(z_y: &LatentTensor, values: Tensor) -> LatentTensor {
        z_y.with_values(values, LatentKind::DiffusionState)
    }
}

/// Reflect-pads the trailing two axes of `(C, H, W)` up to `(C, hp, wp)`.
pub fn reflect_pad(x: &Tensor, hp: usize, wp: usize) -> Result<Tensor> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            return i;
        }
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    let mut data = Vec::with_capacity(c * hp * wp);
    for ci in 0..c {
        for i in 0..hp {
            let si = reflect(i, h);
            for j in 0..wp {
                let sj = reflect(j, w);
                data.push(x.data()[(ci * h + si) * w + sj]);
            }
        }
    }
    Ok(Tensor::new(vec![c, hp, wp], data))
}

fn crop(x: &Tensor, h: usize, w: usize) -> Tensor {
    let s = x.shape();
    let (c, hp, wp) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for i in 0..h {
            let row = (ci * hp + i) * wp;
            data.extend_from_slice(&x.data()[row..row + w]);
        }
    }
    Tensor::new(vec![c, h, w], data)
}
