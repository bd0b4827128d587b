use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::parallel;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Silu(Var),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Upsample2x(Var),
    AddChannelBias(Var, Var),
    Linear(Var, Var, Option<Var>),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    Conv(Var, Var, Option<Var>, ConvGeom),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather(Var, Vec<usize>),
    WeightedMse(Var, Var, Vec<f64>),
    WeightedRms(Var, Var, Vec<f64>, Vec<f64>),
    L1(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of evaluated operations.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis..].iter().product())
}

fn matrix_dims(shape: &[usize], transposed: bool) -> (usize, usize) {
    let (r, c) = (shape[1], shape[2]);
    if transposed {
        (c, r)
    } else {
        (r, c)
    }
}

fn view<'a>(data: &'a [f64], shape: &[usize], transposed: bool) -> Mat<'a> {
    let m = Mat::new(data, shape[1], shape[2]);
    if transposed {
        m.t()
    } else {
        m
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward information, for inference.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if rg { op } else { Op::Leaf },
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        self.same_shape(a, b, "elementwise op");
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        self.push(t, op, &[a, b])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the input is clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        self.push(t, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        assert_eq!(perm.len(), self.shape(a).len(), "permute rank");
        let (data, shape) = permute_data(self.data(a), self.shape(a), perm);
        self.push(Tensor::new(shape, data), Op::Permute(a, perm.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank");
            for d in 0..s.len() {
                assert!(d == axis || s[d] == first[d], "concat shape mismatch on axis {d}");
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let inner = split_at_axis(self.shape(p), axis).1;
                data.extend_from_slice(&self.data(p)[o * inner..(o + 1) * inner]);
            }
        }
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(start + len <= s[axis], "narrow out of range");
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.data(a);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::new(shape, data), Op::Narrow(a, axis, start), &[a])
    }

    /// Nearest-neighbour 2× upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.data(a);
        let mut data = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        self.push(Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], data), Op::Upsample2x(a), &[a])
    }

    /// Adds a per-(item, channel) value `v: (B, C)` to `x: (B, C, ...)`.
    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(self.shape(v), &s[..2], "channel bias shape");
        let inner: usize = s[2..].iter().product();
        let bias = self.data(v);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, val)| val + bias[i / inner])
            .collect();
        self.push(Tensor::new(s, data), Op::AddChannelBias(x, v), &[x, v])
    }

    /// `x · wᵀ + b` over the last axis; `w` is `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let (out_f, in_f) = (self.shape(w)[0], self.shape(w)[1]);
        assert_eq!(*xs.last().unwrap(), in_f, "linear input features");
        let n = self.value(x).len() / in_f;
        let mut y = vec![0.0; n * out_f];
        let beta = if let Some(b) = b {
            let bias = self.data(b);
            assert_eq!(bias.len(), out_f, "linear bias");
            y.chunks_mut(out_f).for_each(|r| r.copy_from_slice(bias));
            1.0
        } else {
            0.0
        };
        gemm(1.0, Mat::new(self.data(x), n, in_f), Mat::new(self.data(w), out_f, in_f).t(), beta, &mut y);
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(shape, y), Op::Linear(x, w, b), &inputs)
    }

    /// Batched product of `(G, ·, ·)` tensors, optionally transposing either operand.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {sa:?} {sb:?}");
        let (m, k) = matrix_dims(&sa, ta);
        let (k2, n) = matrix_dims(&sb, tb);
        assert_eq!(k, k2, "bmm inner dimension");
        let (la, lb) = (sa[1] * sa[2], sb[1] * sb[2]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; sa[0] * m * n];
        parallel::for_each_chunk_mut(&mut out, m * n, |i, c| {
            let am = view(&da[i * la..(i + 1) * la], &sa, ta);
            let bm = view(&db[i * lb..(i + 1) * lb], &sb, tb);
            gemm(1.0, am, bm, 0.0, c);
        });
        self.push(Tensor::new(vec![sa[0], m, n], out), Op::Bmm { a, b, ta, tb }, &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap();
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(Tensor::new(s, data), Op::Softmax(a), &[a])
    }

    /// Square-kernel 2-D convolution, NCHW input, `(cout, cin, k, k)` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert!(ws.len() == 4 && ws[1] == xs[1] && ws[2] == ws[3], "conv2d weight {ws:?} for input {xs:?}");
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        let bias = b.map(|b| self.data(b));
        let y = conv2d_forward(&geom, self.data(x), self.data(w), bias);
        let shape = vec![xs[0], ws[0], geom.out_h(), geom.out_w()];
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(shape, y), Op::Conv(x, w, b, geom), &inputs)
    }

    /// Group normalization of an `(B, C, ...)` tensor with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let c = s[1];
        assert!(groups > 0 && c.is_multiple_of(groups), "{c} channels not divisible into {groups} groups");
        let inner: usize = s[2..].iter().product();
        let cpg = c / groups;
        let len = cpg * inner;
        let (g, bt) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; s[0] * groups];
        let mut y = vec![0.0; src.len()];
        for (gi, ((xs, xh), ys)) in src
            .chunks(len)
            .zip(xhat.chunks_mut(len))
            .zip(y.chunks_mut(len))
            .enumerate()
        {
            let mean = xs.iter().sum::<f64>() / len as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[gi] = r;
            let c0 = (gi % groups) * cpg;
            for (j, ((xv, h), yv)) in xs.iter().zip(xh.iter_mut()).zip(ys.iter_mut()).enumerate() {
                let ch = c0 + j / inner;
                *h = (xv - mean) * r;
                *yv = *h * g[ch] + bt[ch];
            }
        }
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            rstd,
        };
        self.push(Tensor::new(s, y), op, &[x, gamma, beta])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; src.len() / d];
        let mut y = vec![0.0; src.len()];
        for (i, ((xs, xh), ys)) in src.chunks(d).zip(xhat.chunks_mut(d)).zip(y.chunks_mut(d)).enumerate() {
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                xh[j] = (xs[j] - mean) * r;
                ys[j] = xh[j] * g[j] + bt[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push(Tensor::new(s, y), op, &[x, gamma, beta])
    }

    /// Rows of a `(R, D)` table, giving `(idx.len(), D)`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let s = self.shape(table).to_vec();
        let d = s[1];
        let src = self.data(table);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < s[0], "gather index {i} out of range");
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(Tensor::new(vec![idx.len(), d], data), Op::Gather(table, idx.to_vec()), &[table])
    }

    fn per_item_sq(&self, a: Var, b: Var, items: usize) -> Vec<f64> {
        self.same_shape(a, b, "loss");
        let n = self.value(a).len() / items;
        self.data(a)
            .chunks(n)
            .zip(self.data(b).chunks(n))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n as f64)
            .collect()
    }

    /// `(1/B)·Σ_i w_i · mean((a_i − b_i)²)` over the leading axis.
    pub fn weighted_mse(&mut self, a: Var, b: Var, weights: &[f64]) -> Var {
        let ms = self.per_item_sq(a, b, weights.len());
        let l = ms.iter().zip(weights).map(|(m, w)| m * w).sum::<f64>() / weights.len() as f64;
        self.push(Tensor::scalar(l), Op::WeightedMse(a, b, weights.to_vec()), &[a, b])
    }

    /// `(1/B)·Σ_i w_i · sqrt(mean((a_i − b_i)²))` over the leading axis.
    pub fn weighted_rms(&mut self, a: Var, b: Var, weights: &[f64]) -> Var {
        let rms: Vec<f64> = self.per_item_sq(a, b, weights.len()).iter().map(|m| m.sqrt()).collect();
        let l = rms.iter().zip(weights).map(|(m, w)| m * w).sum::<f64>() / weights.len() as f64;
        self.push(Tensor::scalar(l), Op::WeightedRms(a, b, weights.to_vec(), rms), &[a, b])
    }

    /// `mean(|a − b|)`.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "l1");
        let n = self.value(a).len() as f64;
        let l = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        self.push(Tensor::scalar(l), Op::L1(a, b), &[a, b])
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        Gradients { grads: leaves }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let elementwise = |v: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            self.data(v).iter().zip(y).zip(g).map(|((x, yv), gv)| f(*x, *yv, *gv)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                if rg(*b) {
                    self.acc(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let c = self.data(*b).iter().zip(g).map(|(x, gv)| x * gv).collect();
                    self.acc(grads, *a, c);
                }
                if rg(*b) {
                    let c = self.data(*a).iter().zip(g).map(|(x, gv)| x * gv).collect();
                    self.acc(grads, *b, c);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Offset(a) | Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::Silu(a) => {
                let c = elementwise(*a, &|x, _, gv| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                });
                self.acc(grads, *a, c);
            }
            Op::Gelu(a) => self.acc(grads, *a, elementwise(*a, &|x, _, gv| gv * gelu_grad(x))),
            Op::Exp(a) => self.acc(grads, *a, elementwise(*a, &|_, yv, gv| gv * yv)),
            Op::Square(a) => self.acc(grads, *a, elementwise(*a, &|x, _, gv| 2.0 * x * gv)),
            Op::Abs(a) => {
                let c = elementwise(*a, &|x, _, gv| if x == 0.0 { 0.0 } else { x.signum() * gv });
                self.acc(grads, *a, c);
            }
            Op::Clamp(a, lo, hi) => {
                let c = elementwise(*a, &|x, _, gv| if x > *lo && x < *hi { gv } else { 0.0 });
                self.acc(grads, *a, c);
            }
            Op::Sum(a) => self.acc(grads, *a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Permute(a, perm) => {
                let (d, _) = permute_data(g, node.value.shape(), &inverse_perm(perm));
                self.acc(grads, *a, d);
            }
            Op::Concat(parts, axis) => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let inners: Vec<usize> = parts.iter().map(|p| split_at_axis(self.shape(*p), *axis).1).collect();
                let row: usize = inners.iter().sum();
                let mut off = 0;
                for (p, inner) in parts.iter().zip(&inners) {
                    if rg(*p) {
                        let mut d = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + off..o * row + off + inner]);
                        }
                        self.acc(grads, *p, d);
                    }
                    off += inner;
                }
            }
            Op::Narrow(a, axis, start) => {
                let s = self.shape(*a);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; self.value(*a).len()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *a, d);
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(p * h + yy / 2) * w + xx / 2] += g[(p * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::AddChannelBias(x, v) => {
                self.acc(grads, *x, g.to_vec());
                if rg(*v) {
                    let inner = g.len() / self.value(*v).len();
                    self.acc(grads, *v, g.chunks(inner).map(|c| c.iter().sum()).collect());
                }
            }
            Op::Linear(x, w, b) => {
                let (out_f, in_f) = (self.shape(*w)[0], self.shape(*w)[1]);
                let n = g.len() / out_f;
                if rg(*x) {
                    let mut dx = vec![0.0; n * in_f];
                    gemm(1.0, Mat::new(g, n, out_f), Mat::new(self.data(*w), out_f, in_f), 0.0, &mut dx);
                    self.acc(grads, *x, dx);
                }
                if rg(*w) {
                    let mut dw = vec![0.0; out_f * in_f];
                    gemm(1.0, Mat::new(g, n, out_f).t(), Mat::new(self.data(*x), n, in_f), 0.0, &mut dw);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let mut db = vec![0.0; out_f];
                        for row in g.chunks(out_f) {
                            db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, _) = matrix_dims(&sa, *ta);
                let (_, n) = matrix_dims(&sb, *tb);
                let (la, lb) = (sa[1] * sa[2], sb[1] * sb[2]);
                let (da, db) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    let mut out = vec![0.0; da.len()];
                    parallel::for_each_chunk_mut(&mut out, la, |i, o| {
                        let dc = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let bm = view(&db[i * lb..(i + 1) * lb], &sb, *tb);
                        if *ta {
                            gemm(1.0, bm, dc.t(), 0.0, o);
                        } else {
                            gemm(1.0, dc, bm.t(), 0.0, o);
                        }
                    });
                    self.acc(grads, *a, out);
                }
                if rg(*b) {
                    let mut out = vec![0.0; db.len()];
                    parallel::for_each_chunk_mut(&mut out, lb, |i, o| {
                        let dc = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let am = view(&da[i * la..(i + 1) * la], &sa, *ta);
                        if *tb {
                            gemm(1.0, dc.t(), am, 0.0, o);
                        } else {
                            gemm(1.0, am.t(), dc, 0.0, o);
                        }
                    });
                    self.acc(grads, *b, out);
                }
            }
            Op::Softmax(a) => {
                let d = *node.value.shape().last().unwrap();
                let mut out = vec![0.0; g.len()];
                for ((o, yr), gr) in out.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::Conv(x, w, b, geom) => {
                let (dx, dw, db) = conv2d_backward(geom, self.data(*x), self.data(*w), g, rg(*x));
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, dw);
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let s = self.shape(*x);
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let cpg = c / groups;
                let len = cpg * inner;
                let gam = self.data(*gamma);
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (gi, ((gs, xh), dxs)) in g.chunks(len).zip(xhat.chunks(len)).zip(dx.chunks_mut(len)).enumerate() {
                    let c0 = (gi % groups) * cpg;
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..len {
                        let ch = c0 + j / inner;
                        let dh = gs[j] * gam[ch];
                        m1 += dh;
                        m2 += dh * xh[j];
                        dgamma[ch] += gs[j] * xh[j];
                        dbeta[ch] += gs[j];
                    }
                    m1 /= len as f64;
                    m2 /= len as f64;
                    for j in 0..len {
                        let ch = c0 + j / inner;
                        dxs[j] = rstd[gi] * (gs[j] * gam[ch] - m1 - xh[j] * m2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gam = self.data(*gamma);
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (i, ((gs, xh), dxs)) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..d {
                        let dh = gs[j] * gam[j];
                        m1 += dh;
                        m2 += dh * xh[j];
                        dgamma[j] += gs[j] * xh[j];
                        dbeta[j] += gs[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dxs[j] = rstd[i] * (gs[j] * gam[j] - m1 - xh[j] * m2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Gather(table, idx) => {
                let d = self.shape(*table)[1];
                let mut out = vec![0.0; self.value(*table).len()];
                for (r, &t) in idx.iter().enumerate() {
                    for j in 0..d {
                        out[t * d + j] += g[r * d + j];
                    }
                }
                self.acc(grads, *table, out);
            }
            Op::WeightedMse(a, b, w) => {
                let n = self.value(*a).len() / w.len();
                let bsz = w.len() as f64;
                let diff: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .enumerate()
                    .map(|(j, (p, q))| g[0] * 2.0 * w[j / n] * (p - q) / (bsz * n as f64))
                    .collect();
                self.push_pair(grads, *a, *b, diff);
            }
            Op::WeightedRms(a, b, w, rms) => {
                let n = self.value(*a).len() / w.len();
                let bsz = w.len() as f64;
                let diff: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .enumerate()
                    .map(|(j, (p, q))| {
                        let r = rms[j / n];
                        if r > 0.0 {
                            g[0] * w[j / n] * (p - q) / (bsz * n as f64 * r)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.push_pair(grads, *a, *b, diff);
            }
            Op::L1(a, b) => {
                let n = self.value(*a).len() as f64;
                let diff: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(p, q)| {
                        let d = p - q;
                        if d == 0.0 {
                            0.0
                        } else {
                            g[0] * d.signum() / n
                        }
                    })
                    .collect();
                self.push_pair(grads, *a, *b, diff);
            }
        }
    }

    /// Sends `d` to `a` and `-d` to `b`.
    fn push_pair(&self, grads: &mut [Option<Vec<f64>>], a: Var, b: Var, d: Vec<f64>) {
        if self.nodes[b.0].requires_grad {
            self.acc(grads, b, d.iter().map(|v| -v).collect());
        }
        self.acc(grads, a, d);
    }
}
