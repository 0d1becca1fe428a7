//! Reverse-mode autodiff tape. Every op records its inputs; `backward`
//! walks the tape once in reverse and returns parameter gradients.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    Neg,
}

/// Stride/padding for a 2-D convolution over `[B, C, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Unary(Var, Unary),
    Clamp(Var, f32, f32),
    Minimum(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Reshape(Var),
    Conv2d(Var, Var, Var, ConvGeom),
    Softmax(Var),
    Bmm(Var, Var, bool),
    Reduce { x: Var, outer: usize, mid: usize, inner: usize, mean: bool },
    SumAll(Var),
    NormRows(Var, f32),
    ChannelAffine(Var, Var, Var),
}

enum Slot {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    slot: Slot,
    op: Op,
    grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of a scalar loss with respect to every parameter used.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.ids().map(|id| Some(Tensor::zeros(store.get(id).shape()))).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.index()).and_then(Option::as_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += b),
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= k, "kernel {k} larger than padded input {len}+2·{pad}");
    (len + 2 * pad - k) / stride + 1
}

struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn new(x: &[usize], wt: &[usize], g: ConvGeom) -> Self {
        assert!(x.len() == 4 && wt.len() == 4 && x[1] == wt[1], "conv2d shapes {x:?} / {wt:?}");
        let (kh, kw) = (wt[2], wt[3]);
        Self {
            b: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: wt[0],
            kh,
            kw,
            oh: conv_out(x[2], kh, g.stride.0, g.pad.0),
            ow: conv_out(x[3], kw, g.stride.1, g.pad.1),
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.b * self.oh * self.ow
    }

    /// Visits `(col_index, x_index)` for every in-bounds im2col entry.
    fn for_each(&self, g: ConvGeom, mut f: impl FnMut(usize, usize)) {
        let p = self.oh * self.ow;
        let ncols = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for bi in 0..self.b {
                        let xbase = (bi * self.c + c) * self.h * self.w;
                        for oi in 0..self.oh {
                            let y = (oi * g.stride.0 + ki) as isize - g.pad.0 as isize;
                            if y < 0 || y >= self.h as isize {
                                continue;
                            }
                            let cbase = row * ncols + bi * p + oi * self.ow;
                            let xrow = xbase + y as usize * self.w;
                            for oj in 0..self.ow {
                                let x = (oj * g.stride.1 + kj) as isize - g.pad.1 as isize;
                                if x >= 0 && x < self.w as isize {
                                    f(cbase + oj, xrow + x as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, t: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { slot: Slot::Owned(t), op, grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, t: Tensor, op: Op, inputs: &[Var]) -> Var {
        let grad = inputs.iter().any(|v| self.nodes[v.0].grad);
        self.push(t, op, grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].slot {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node { slot: Slot::Param(id), op: Op::Leaf, grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap();
        self.push_op(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shapes");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data).unwrap();
        self.push_op(out, op, &[a, b])
    }

    /// `[M, K] × [K, N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} × {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, false);
        self.push_op(Tensor::new(&[m, n], out).unwrap(), Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `[N]` row to every row of `[M, N]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = *tx.shape().last().unwrap();
        assert_eq!(tb.len(), n, "bias width");
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        self.push_op(out, Op::AddRow(x, b), &[x, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Minimum(a, b), f32::min)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.map(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn unary(&mut self, x: Var, u: Unary) -> Var {
        let f: fn(f32) -> f32 = match u {
            Unary::Relu => |v| v.max(0.0),
            Unary::Tanh => f32::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Exp => f32::exp,
            Unary::Log => f32::ln,
            Unary::Square => |v| v * v,
            Unary::Neg => |v| -v,
        };
        self.map(x, Op::Unary(x, u), f)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let lead = self.shape(xs[0]);
        let lead = lead[..lead.len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading dims");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        self.push_op(Tensor::new(&shape, out).unwrap(), Op::Concat(xs.to_vec()), xs)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let w = *s.last().unwrap();
        assert!(start + len <= w, "slice {start}+{len} of {w}");
        let rows = t.len() / w.max(1);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        self.push_op(Tensor::new(&shape, out).unwrap(), Op::Slice(x, start, len), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape).expect("reshape size");
        self.push_op(t, Op::Reshape(x), &[x])
    }

    /// `[B, C, H, W] ⊛ [O, C, KH, KW] + b[O]` → `[B, O, OH, OW]` via im2col.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, g: ConvGeom) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let d = ConvDims::new(tx.shape(), tw.shape(), g);
        assert_eq!(tb.len(), d.o, "conv bias");
        let (rows, ncols) = (d.rows(), d.cols());
        let mut col = vec![0.0f32; rows * ncols];
        let xd = tx.data();
        d.for_each(g, |ci, xi| col[ci] = xd[xi]);
        let mut tmp = vec![0.0f32; d.o * ncols];
        gemm(d.o, rows, ncols, tw.data(), (rows, 1), &col, (ncols, 1), &mut tmp, false);
        let p = d.oh * d.ow;
        let mut out = vec![0.0f32; d.b * d.o * p];
        for o in 0..d.o {
            let bias = tb.data()[o];
            for bi in 0..d.b {
                let src = &tmp[o * ncols + bi * p..o * ncols + (bi + 1) * p];
                let dst = &mut out[(bi * d.o + o) * p..(bi * d.o + o + 1) * p];
                dst.iter_mut().zip(src).for_each(|(y, s)| *y = s + bias);
            }
        }
        let t = Tensor::new(&[d.b, d.o, d.oh, d.ow], out).unwrap();
        self.push_op(t, Op::Conv2d(x, w, b, g), &[x, w, b])
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push_op(out, Op::Softmax(x), &[x])
    }

    /// Batched matmul `[B, M, K] × [B, K, N]`, or `[B, M, K] × [B, N, K]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm {sa:?} × {sb:?}");
        let (bn, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "bmm inner dims");
        let mut out = vec![0.0; bn * m * n];
        let bs = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..bn {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..],
                (k, 1),
                &tb.data()[i * k * n..],
                bs,
                &mut out[i * m * n..],
                false,
            );
        }
        self.push_op(Tensor::new(&[bn, m, n], out).unwrap(), Op::Bmm(a, b, trans_b), &[a, b])
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Var {
        let t = self.value(x);
        let s = t.shape();
        assert!(axis < s.len());
        let outer: usize = s[..axis].iter().product();
        let mid = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * inner];
        let scale = if mean { 1.0 / mid as f32 } else { 1.0 };
        for o in 0..outer {
            for m in 0..mid {
                let src = &t.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, v)| *d += v);
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape: Vec<usize> = s[..axis].iter().chain(&s[axis + 1..]).cloned().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(&shape, out).unwrap();
        self.push_op(t, Op::Reduce { x, outer, mid, inner, mean }, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        self.reduce(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        self.reduce(x, axis, true)
    }

    /// Mean over all trailing spatial dims of `[B, C, ...]` → `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let spatial: usize = s[2..].iter().product();
        let r = self.reshape(x, &[s[0], s[1], spatial]);
        self.mean_axis(r, 2)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f32 = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f32;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Normalizes each sample (leading axis) to zero mean, unit variance.
    pub fn norm_rows(&mut self, x: Var, eps: f32) -> Var {
        let t = self.value(x);
        let b = t.shape()[0];
        let n = t.len() / b;
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        self.push_op(out, Op::NormRows(x, eps), &[x])
    }

    /// `x[b, c, ...]·γ[c] + β[c]`
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let s = tx.shape();
        let c = s[1];
        assert!(tg.len() == c && tb.len() == c, "affine channels");
        let inner: usize = s[2..].iter().product();
        let mut out = tx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let ch = i % c;
            let (g, bb) = (tg.data()[ch], tb.data()[ch]);
            chunk.iter_mut().for_each(|v| *v = *v * g + bb);
        }
        self.push_op(out, Op::ChannelAffine(x, gamma, beta), &[x, gamma, beta])
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let (before, _) = grads.split_at_mut(i);
            self.backprop(i, &g, before);
            grads[i] = Some(g);
        }
        let mut out = Gradients { grads: vec![None; self.params.len()] };
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads[v.0].take() {
                    out.grads[pid] = Some(Tensor::new(self.value(*v).shape(), g).unwrap());
                }
            }
        }
        out
    }

    fn backprop(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = self.value(Var(i)).data();
        let needs = |v: Var| self.nodes[v.0].grad;
        let len_of = |v: Var| self.value(v).len();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = len_of(v);
                grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(a) {
                    let bd = self.value(b).data();
                    gemm(m, n, k, g, (n, 1), bd, (1, n), acc!(a), true);
                }
                if needs(b) {
                    let ad = self.value(a).data();
                    gemm(k, m, n, ad, (1, k), g, (n, 1), acc!(b), true);
                }
            }
            &Op::AddRow(x, b) => {
                if needs(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if needs(b) {
                    let n = len_of(b);
                    let db = acc!(b);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    acc!(a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if needs(b) {
                    acc!(b).iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let bd = self.value(b).data();
                    acc!(a).iter_mut().zip(g).zip(bd).for_each(|((d, x), y)| *d += x * y);
                }
                if needs(b) {
                    let ad = self.value(a).data();
                    acc!(b).iter_mut().zip(g).zip(ad).for_each(|((d, x), y)| *d += x * y);
                }
            }
            &Op::Div(a, b) => {
                let bd = self.value(b).data();
                if needs(a) {
                    acc!(a).iter_mut().zip(g).zip(bd).for_each(|((d, x), y)| *d += x / y);
                }
                if needs(b) {
                    acc!(b).iter_mut().zip(g).zip(bd.iter().zip(out)).for_each(|((d, x), (y, q))| *d -= x * q / y);
                }
            }
            &Op::Minimum(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if needs(a) {
                    let da = acc!(a);
                    for j in 0..g.len() {
                        if ad[j] <= bd[j] {
                            da[j] += g[j];
                        }
                    }
                }
                if needs(b) {
                    let db = acc!(b);
                    for j in 0..g.len() {
                        if ad[j] > bd[j] {
                            db[j] += g[j];
                        }
                    }
                }
            }
            &Op::Scale(x, s) => {
                if needs(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(d, v)| *d += v * s);
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                if needs(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            &Op::Clamp(x, lo, hi) => {
                if needs(x) {
                    let xd = self.value(x).data();
                    let dx = acc!(x);
                    for j in 0..g.len() {
                        if xd[j] > lo && xd[j] < hi {
                            dx[j] += g[j];
                        }
                    }
                }
            }
            &Op::Unary(x, u) => {
                if !needs(x) {
                    return;
                }
                let xd = self.value(x).data();
                let dx = acc!(x);
                for j in 0..g.len() {
                    let (xv, y) = (xd[j], out[j]);
                    let local = match u {
                        Unary::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - y * y,
                        Unary::Sigmoid => y * (1.0 - y),
                        Unary::Softplus => sigmoid(xv),
                        Unary::Exp => y,
                        Unary::Log => 1.0 / xv,
                        Unary::Square => 2.0 * xv,
                        Unary::Neg => -1.0,
                    };
                    dx[j] += g[j] * local;
                }
            }
            Op::Concat(xs) => {
                let total = *self.shape(Var(i)).last().unwrap();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for &v in xs {
                    let w = *self.shape(v).last().unwrap();
                    if needs(v) {
                        let dv = acc!(v);
                        for r in 0..rows {
                            dv[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + off..r * total + off + w])
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                    off += w;
                }
            }
            &Op::Slice(x, start, len) => {
                if needs(x) {
                    let w = *self.shape(x).last().unwrap();
                    let dx = acc!(x);
                    for (r, row) in g.chunks(len.max(1)).enumerate() {
                        dx[r * w + start..r * w + start + len].iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            &Op::Conv2d(x, w, b, geom) => {
                let d = ConvDims::new(self.shape(x), self.shape(w), geom);
                let (rows, ncols, p) = (d.rows(), d.cols(), d.oh * d.ow);
                // Output gradient in [O, B·P] layout.
                let mut gt = vec![0.0f32; d.o * ncols];
                for bi in 0..d.b {
                    for o in 0..d.o {
                        gt[o * ncols + bi * p..o * ncols + (bi + 1) * p]
                            .copy_from_slice(&g[(bi * d.o + o) * p..(bi * d.o + o + 1) * p]);
                    }
                }
                if needs(b) {
                    let db = acc!(b);
                    for o in 0..d.o {
                        db[o] += gt[o * ncols..(o + 1) * ncols].iter().sum::<f32>();
                    }
                }
                if needs(w) {
                    let mut col = vec![0.0f32; rows * ncols];
                    let xd = self.value(x).data();
                    d.for_each(geom, |ci, xi| col[ci] = xd[xi]);
                    gemm(d.o, ncols, rows, &gt, (ncols, 1), &col, (1, ncols), acc!(w), true);
                }
                if needs(x) {
                    let wd = self.value(w).data();
                    let mut dcol = vec![0.0f32; rows * ncols];
                    gemm(rows, d.o, ncols, wd, (1, rows), &gt, (ncols, 1), &mut dcol, false);
                    let dx = acc!(x);
                    d.for_each(geom, |ci, xi| dx[xi] += dcol[ci]);
                }
            }
            &Op::Softmax(x) => {
                if needs(x) {
                    let n = *self.shape(x).last().unwrap();
                    let dx = acc!(x);
                    for r in 0..g.len() / n {
                        let (yr, gr) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::Bmm(a, b, trans_b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (bn, m, k) = (sa[0], sa[1], sa[2]);
                let n = if trans_b { sb[1] } else { sb[2] };
                if needs(a) {
                    let bd = self.value(b).data();
                    let da = acc!(a);
                    // dA = G·Bᵀ, or G·B when B entered transposed.
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    for i in 0..bn {
                        gemm(m, n, k, &g[i * m * n..], (n, 1), &bd[i * k * n..], bs, &mut da[i * m * k..], true);
                    }
                }
                if needs(b) {
                    let ad = self.value(a).data();
                    let db = acc!(b);
                    for i in 0..bn {
                        if trans_b {
                            // dB[N, K] = Gᵀ·A
                            gemm(n, m, k, &g[i * m * n..], (1, n), &ad[i * m * k..], (k, 1), &mut db[i * k * n..], true);
                        } else {
                            // dB[K, N] = Aᵀ·G
                            gemm(k, m, n, &ad[i * m * k..], (1, k), &g[i * m * n..], (n, 1), &mut db[i * k * n..], true);
                        }
                    }
                }
            }
            &Op::Reduce { x, outer, mid, inner, mean } => {
                if needs(x) {
                    let s = if mean { 1.0 / mid as f32 } else { 1.0 };
                    let dx = acc!(x);
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            dx[(o * mid + m) * inner..(o * mid + m + 1) * inner]
                                .iter_mut()
                                .zip(go)
                                .for_each(|(d, v)| *d += v * s);
                        }
                    }
                }
            }
            &Op::SumAll(x) => {
                if needs(x) {
                    acc!(x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::NormRows(x, eps) => {
                if needs(x) {
                    let xd = self.value(x).data();
                    let bsz = self.shape(x)[0];
                    let n = xd.len() / bsz;
                    let dx = acc!(x);
                    for r in 0..bsz {
                        let xr = &xd[r * n..(r + 1) * n];
                        let mean = xr.iter().sum::<f32>() / n as f32;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                        let inv = 1.0 / (var + eps).sqrt();
                        let (yr, gr) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let gm = gr.iter().sum::<f32>() / n as f32;
                        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                        for j in 0..n {
                            dx[r * n + j] += inv * (gr[j] - gm - yr[j] * gy);
                        }
                    }
                }
            }
            &Op::ChannelAffine(x, gamma, beta) => {
                let s = self.shape(x);
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let gd = self.value(gamma).data();
                if needs(x) {
                    let dx = acc!(x);
                    for (k, (d, v)) in dx.iter_mut().zip(g).enumerate() {
                        *d += v * gd[(k / inner) % c];
                    }
                }
                if needs(gamma) {
                    let xd = self.value(x).data();
                    let dg = acc!(gamma);
                    for (k, (v, xv)) in g.iter().zip(xd).enumerate() {
                        dg[(k / inner) % c] += v * xv;
                    }
                }
                if needs(beta) {
                    let db = acc!(beta);
                    for (k, v) in g.iter().enumerate() {
                        db[(k / inner) % c] += v;
                    }
                }
            }
        }
    }
}
