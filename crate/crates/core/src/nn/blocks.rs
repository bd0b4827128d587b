use rand::Rng;

use super::{Bound, Conv2d, GroupNorm, LayerNorm, Linear, ParamStore};
use crate::autograd::{Graph, Var};

/// Pre-activation residual block with an optional per-channel embedding shift.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            emb: emb_dim.map(|d| Linear::new(store, &format!("{name}.emb"), d, cout, true, rng)),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    /// `emb` is the already activated embedding, `(B, emb_dim)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, emb: Option<Var>) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, p, h);
        if let (Some(lin), Some(e)) = (&self.emb, emb) {
            let shift = lin.forward(g, p, e);
            h = g.add_channel_bias(h, shift);
        }
        let h = self.norm2.forward(g, p, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, p, x),
            None => x,
        };
        g.add(skip, h)
    }
}

/// Multi-head attention of `(B, N, C)` queries over `(B, S, D)` keys/values.
#[derive(Debug, Clone)]
pub struct Attention {
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "{dim} channels not divisible by {heads} heads");
        Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), context_dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), context_dim, dim, false, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, n, c) = (s[0], s[1], s[2]);
        let d = c / self.heads;
        let x = g.reshape(x, &[b, n, self.heads, d]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * self.heads, n, d])
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, context: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, n, c) = (s[0], s[1], s[2]);
        let d = c / self.heads;
        let q = self.q.forward(g, p, x);
        let k = self.k.forward(g, p, context);
        let v = self.v.forward(g, p, context);
        let (q, k, v) = (self.split_heads(g, q), self.split_heads(g, k), self.split_heads(g, v));
        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores);
        let o = g.bmm(attn, v, false, false);
        let o = g.reshape(o, &[b, self.heads, n, d]);
        let o = g.permute(o, &[0, 2, 1, 3]);
        let o = g.reshape(o, &[b, n, c]);
        self.out.forward(g, p, o)
    }
}

/// Attention block over an NCHW feature map: optional self-attention, cross-attention
/// to a context sequence, and a GELU feed-forward, each pre-normalized and residual.
#[derive(Debug, Clone)]
pub struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: Linear,
    self_attn: Option<(LayerNorm, Attention)>,
    cross_norm: LayerNorm,
    cross: Attention,
    ff_norm: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Linear,
}

impl SpatialTransformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        with_self_attention: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), dim),
            proj_in: Linear::new(store, &format!("{name}.proj_in"), dim, dim, true, rng),
            self_attn: with_self_attention.then(|| {
                (
                    LayerNorm::new(store, &format!("{name}.self_norm"), dim),
                    Attention::new(store, &format!("{name}.self"), dim, dim, heads, rng),
                )
            }),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), dim),
            cross: Attention::new(store, &format!("{name}.cross"), dim, context_dim, heads, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 4 * dim, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * dim, dim, true, rng),
            proj_out: Linear::new(store, &format!("{name}.proj_out"), dim, dim, true, rng),
        }
    }

    /// `x: (B, C, H, W)`, `context: (B, S, context_dim)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, context: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, c, hh, ww) = (s[0], s[1], s[2], s[3]);
        let h = self.norm.forward(g, p, x);
        let h = g.permute(h, &[0, 2, 3, 1]);
        let h = g.reshape(h, &[b, hh * ww, c]);
        let mut h = self.proj_in.forward(g, p, h);
        if let Some((ln, attn)) = &self.self_attn {
            let n = ln.forward(g, p, h);
            let a = attn.forward(g, p, n, n);
            h = g.add(h, a);
        }
        let n = self.cross_norm.forward(g, p, h);
        let a = self.cross.forward(g, p, n, context);
        h = g.add(h, a);
        let n = self.ff_norm.forward(g, p, h);
        let f = self.ff1.forward(g, p, n);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, p, f);
        h = g.add(h, f);
        let h = self.proj_out.forward(g, p, h);
        let h = g.reshape(h, &[b, hh, ww, c]);
        let h = g.permute(h, &[0, 3, 1, 2]);
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::finite_difference_check;
    use crate::autograd::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transformer_gradients_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let blk = SpatialTransformer::new(&mut store, "t", 4, 3, 2, true, &mut rng);
        let res = ResBlock::new(&mut store, "r", 4, 6, Some(5), &mut rng);
        let x = Tensor::randn(&[2, 4, 2, 3], 1.0, &mut rng);
        let ctx = Tensor::randn(&[2, 2, 3], 1.0, &mut rng);
        let emb = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let params: Vec<Tensor> = store.tensors().cloned().collect();
        let mut all = params.clone();
        all.extend([x, ctx, emb]);
        let np = params.len();
        let check = finite_difference_check(
            &all,
            |g, v| {
                let b = Bound(v[..np].to_vec());
                let y = blk.forward(g, &b, v[np], v[np + 1]);
                assert_eq!(g.shape(y), &[2, 4, 2, 3]);
                let z = res.forward(g, &b, y, Some(v[np + 2]));
                assert_eq!(g.shape(z), &[2, 6, 2, 3]);
                let s = g.square(z);
                g.mean(s)
            },
            64,
            1e-5,
            &mut rng,
        );
        assert!(check.max_rel_error(1e-6) < 1e-5, "{:?}", check.samples);
    }
}
