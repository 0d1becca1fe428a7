use super::params::{ParamId, ParamStore};
use super::tape::{ConvGeom, Tape, Var};
use super::tensor::{NnError, Tensor};
use rand::Rng;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±gain/√in` weights and biases.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, gain: f32, rng: &mut R) -> Self {
        let bound = gain / (in_dim.max(1) as f32).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), &[in_dim, out_dim], bound, rng);
        let b = store.add_uniform(&format!("{name}.b"), &[out_dim], bound, rng);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let (w, b) = (t.param(self.w), t.param(self.b));
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

/// 2-D convolution; a 1-D convolution is the `kh = 1` case over `[B, C, 1, L]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new2d<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (in_ch * k * k) as f32).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), &[out_ch, in_ch, k, k], bound, rng);
        let b = store.add_uniform(&format!("{name}.b"), &[out_ch], 1.0 / ((in_ch * k * k) as f32).sqrt(), rng);
        Self { w, b, geom: ConvGeom { stride: (stride, stride), pad: (pad, pad) }, in_ch, out_ch }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new1d<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (in_ch * k) as f32).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), &[out_ch, in_ch, 1, k], bound, rng);
        let b = store.add_uniform(&format!("{name}.b"), &[out_ch], 1.0 / ((in_ch * k) as f32).sqrt(), rng);
        Self { w, b, geom: ConvGeom { stride: (1, stride), pad: (0, pad) }, in_ch, out_ch }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let (w, b) = (t.param(self.w), t.param(self.b));
        t.conv2d(x, w, b, self.geom)
    }

    pub fn out_len(&self, len: usize, kernel: usize, axis: usize) -> usize {
        let (s, p) = if axis == 0 { (self.geom.stride.0, self.geom.pad.0) } else { (self.geom.stride.1, self.geom.pad.1) };
        (len + 2 * p - kernel) / s + 1
    }
}

/// Single-group normalization with per-channel affine.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let n = t.norm_rows(x, 1e-5);
        let (g, b) = (t.param(self.gamma), t.param(self.beta));
        t.channel_affine(n, g, b)
    }
}

/// GRU cell with gate order (reset, update, candidate):
/// `h' = (1 − z)·n + z·h`, `n = tanh(W_in x + b_in + r·(W_hn h + b_hn))`.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        Self {
            w_ih: store.add_uniform(&format!("{name}.w_ih"), &[input, 3 * hidden], bound, rng),
            w_hh: store.add_uniform(&format!("{name}.w_hh"), &[hidden, 3 * hidden], bound, rng),
            b_ih: store.add_uniform(&format!("{name}.b_ih"), &[3 * hidden], bound, rng),
            b_hh: store.add_uniform(&format!("{name}.b_hh"), &[3 * hidden], bound, rng),
            input,
            hidden,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let (wi, wh, bi, bh) = (t.param(self.w_ih), t.param(self.w_hh), t.param(self.b_ih), t.param(self.b_hh));
        let gi = t.matmul(x, wi);
        let gi = t.add_row(gi, bi);
        let gh = t.matmul(h, wh);
        let gh = t.add_row(gh, bh);
        let (ir, iz, inn) = (t.slice(gi, 0, hd), t.slice(gi, hd, hd), t.slice(gi, 2 * hd, hd));
        let (hr, hz, hn) = (t.slice(gh, 0, hd), t.slice(gh, hd, hd), t.slice(gh, 2 * hd, hd));
        let r = t.add(ir, hr);
        let r = t.sigmoid(r);
        let z = t.add(iz, hz);
        let z = t.sigmoid(z);
        let rn = t.mul(r, hn);
        let n = t.add(inn, rn);
        let n = t.tanh(n);
        // (1 − z)·n + z·h = n + z·(h − n)
        let diff = t.sub(h, n);
        let zd = t.mul(z, diff);
        t.add(n, zd)
    }
}

/// `softmax(q·Kᵀ/√d_k)·V` for one query per batch row.
/// `q: [B, d_k]`, `k: [B, S, d_k]`, `v: [B, S, d_v]` → (`[B, d_v]`, weights `[B, S]`).
pub fn scaled_dot_attention(t: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var), NnError> {
    let (sq, sk, sv) = (t.shape(q).to_vec(), t.shape(k).to_vec(), t.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 3 || sv.len() != 3 {
        return Err(NnError::Shape(format!("attention ranks {sq:?} {sk:?} {sv:?}")));
    }
    let (b, dk) = (sq[0], sq[1]);
    if dk == 0 {
        return Err(NnError::Shape("d_k = 0".into()));
    }
    if sk[0] != b || sk[2] != dk || sv[0] != b || sv[1] != sk[1] {
        return Err(NnError::Shape(format!("attention shapes {sq:?} {sk:?} {sv:?}")));
    }
    let s = sk[1];
    let q3 = t.reshape(q, &[b, 1, dk]);
    let scores = t.bmm(q3, k, true);
    let scores = t.scale(scores, 1.0 / (dk as f32).sqrt());
    let scores = t.reshape(scores, &[b, s]);
    let w = t.softmax(scores);
    let w3 = t.reshape(w, &[b, 1, s]);
    let out = t.bmm(w3, v, false);
    let out = t.reshape(out, &[b, sv[2]]);
    Ok((out, w))
}

pub const SIGMA_FLOOR: f32 = 1e-3;
const HALF_LN_2PI: f32 = 0.918_938_5;

/// Two parallel linear layers producing a diagonal Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct GaussianHead {
    pub mu: Linear,
    pub sigma: Linear,
}

impl GaussianHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            mu: Linear::new(store, &format!("{name}.mu"), in_dim, out_dim, 0.01, rng),
            sigma: Linear::new(store, &format!("{name}.sigma"), in_dim, out_dim, 0.01, rng),
        }
    }

    /// `(mu, sigma)` with `sigma = softplus(raw) + floor`.
    pub fn forward(&self, t: &mut Tape, x: Var) -> (Var, Var) {
        let mu = self.mu.forward(t, x);
        let raw = self.sigma.forward(t, x);
        let sp = t.softplus(raw);
        (mu, t.add_scalar(sp, SIGMA_FLOOR))
    }
}

/// Summed diagonal-Gaussian log-density, `[B, D]` → `[B]`.
pub fn gaussian_log_prob(t: &mut Tape, mu: Var, sigma: Var, action: Var) -> Var {
    let d = t.sub(action, mu);
    let z = t.div(d, sigma);
    let z2 = t.square(z);
    let a = t.scale(z2, -0.5);
    let ls = t.log(sigma);
    let lp = t.sub(a, ls);
    let lp = t.add_scalar(lp, -HALF_LN_2PI);
    t.sum_axis(lp, 1)
}

/// Summed diagonal-Gaussian entropy, `[B, D]` → `[B]`.
pub fn gaussian_entropy(t: &mut Tape, sigma: Var) -> Var {
    let ls = t.log(sigma);
    let e = t.add_scalar(ls, 0.5 + HALF_LN_2PI);
    t.sum_axis(e, 1)
}

pub fn gaussian_log_prob_f64(mu: &[f64], sigma: &[f64], a: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .zip(a)
        .map(|((m, s), x)| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
        .sum()
}

/// Reparameterized sample `mu + sigma·ε`, `ε ~ N(0, 1)`.
pub fn sample_gaussian<R: Rng + ?Sized>(mu: &[f32], sigma: &[f32], rng: &mut R) -> Vec<f32> {
    use rand_distr::{Distribution, StandardNormal};
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| {
            let e: f32 = StandardNormal.sample(rng);
            m + s * e
        })
        .collect()
}

/// Tensors whose gradient norm is below this fraction of the largest one are
/// judged against that floor; single-precision differences cannot resolve them.
const GRAD_FLOOR: f64 = 1e-2;

/// Central-difference check of every parameter gradient of `loss_fn`.
/// Returns the largest per-tensor relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)`.
pub fn grad_check(store: &mut ParamStore, eps: f32, loss_fn: impl Fn(&mut Tape) -> Var) -> f64 {
    grad_check_tensors(store, eps, loss_fn).into_iter().map(|(_, e)| e).fold(0.0, f64::max)
}

/// Per-tensor relative errors of [`grad_check`], by parameter name.
pub fn grad_check_tensors(store: &mut ParamStore, eps: f32, loss_fn: impl Fn(&mut Tape) -> Var) -> Vec<(String, f64)> {
    let analytic = {
        let mut t = Tape::new(store);
        let l = loss_fn(&mut t);
        t.backward(l)
    };
    let eval = |s: &ParamStore| -> f64 {
        let mut t = Tape::new(s);
        let l = loss_fn(&mut t);
        t.value(l).data()[0] as f64
    };
    let mut per_tensor = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        let mut numeric = vec![0.0f64; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * eps as f64);
        }
        let zeros = vec![0.0f32; n];
        let a = analytic.get(id).map_or(&zeros[..], |g| g.data());
        let diff: f64 = a.iter().zip(&numeric).map(|(&x, y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|y| y * y).sum::<f64>().sqrt();
        per_tensor.push((store.name(id).to_string(), diff, na.max(nn)));
    }
    let scale = per_tensor.iter().map(|t| t.2).fold(0.0, f64::max);
    let floor = (GRAD_FLOOR * scale).max(1e-12);
    per_tensor.into_iter().map(|(name, diff, d)| (name, diff / d.max(floor))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Weighted sum so every output element carries a distinct gradient.
    fn probe(t: &mut Tape, y: Var, seed: u64) -> Var {
        let w = random(t.shape(y), seed);
        let w = t.input(w);
        let p = t.mul(y, w);
        t.sum(p)
    }

    #[test]
    fn linear_grad_check() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 6, 4, 1.0, &mut rng(0));
        let x = random(&[3, 6], 1);
        let err = grad_check(&mut store, 1e-3, |t| {
            let xv = t.input(x.clone());
            let y = lin.forward(t, xv);
            probe(t, y, 2)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_grad_check() {
        let mut store = ParamStore::new();
        let c1 = Conv::new1d(&mut store, "c1", 2, 3, 5, 2, 2, &mut rng(3));
        let c2 = Conv::new2d(&mut store, "c2", 2, 3, 3, 2, 1, &mut rng(4));
        let x1 = random(&[2, 2, 1, 13], 5);
        let x2 = random(&[2, 2, 6, 5], 6);
        let err = grad_check(&mut store, 1e-3, |t| {
            let a = t.input(x1.clone());
            let a = c1.forward(t, a);
            let b = t.input(x2.clone());
            let b = c2.forward(t, b);
            let la = probe(t, a, 7);
            let lb = probe(t, b, 8);
            t.add(la, lb)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut store = ParamStore::new();
        let c = Conv::new2d(&mut store, "c", 2, 2, 3, 2, 1, &mut rng(9));
        let x = random(&[1, 2, 5, 4], 10);
        let mut t = Tape::new(&store);
        let xv = t.input(x.clone());
        let y = c.forward(&mut t, xv);
        let (w, b) = (store.get(c.w).data(), store.get(c.b).data());
        let ys = t.value(y);
        assert_eq!(ys.shape(), &[1, 2, 3, 2]);
        for o in 0..2 {
            for i in 0..3 {
                for j in 0..2 {
                    let mut s = b[o] as f64;
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (y0, x0) = (i as isize * 2 + ki as isize - 1, j as isize * 2 + kj as isize - 1);
                                if y0 >= 0 && y0 < 5 && x0 >= 0 && x0 < 4 {
                                    s += (w[((o * 2 + ci) * 3 + ki) * 3 + kj] * x.data()[(ci * 5 + y0 as usize) * 4 + x0 as usize]) as f64;
                                }
                            }
                        }
                    }
                    assert!((ys.data()[(o * 3 + i) * 2 + j] as f64 - s).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn gru_zero_params_halve_state() {
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "g", 3, 4, &mut rng(0));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut t = Tape::new(&store);
        let x = t.input(random(&[1, 3], 1));
        let h = t.input(Tensor::new(&[1, 4], vec![0.8, -0.4, 2.0, 0.0]).unwrap());
        let h2 = gru.forward(&mut t, x, h);
        assert_eq!(t.value(h2).data(), &[0.4, -0.2, 1.0, 0.0]);
    }

    #[test]
    fn gru_grad_check_and_bound() {
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "g", 3, 4, &mut rng(11));
        let x = random(&[2, 3], 12);
        let h = random(&[2, 4], 13);
        let err = grad_check(&mut store, 1e-3, |t| {
            let xv = t.input(x.clone());
            let hv = t.input(h.clone());
            let h1 = gru.forward(t, xv, hv);
            let h2 = gru.forward(t, xv, h1);
            probe(t, h2, 14)
        });
        assert!(err < 1e-3, "{err}");
        let mut t = Tape::new(&store);
        let mut hv = t.input(random(&[1, 4], 15));
        for k in 0..50 {
            let xv = t.input(random(&[1, 3], 100 + k).reshaped(&[1, 3]).unwrap());
            let bound = t.value(hv).data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
            hv = gru.forward(&mut t, xv, hv);
            assert!(t.value(hv).data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn attention_cases() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let q = t.input(Tensor::new(&[1, 1], vec![0.0]).unwrap());
        let k = t.input(Tensor::new(&[1, 2, 1], vec![0.0, 0.0]).unwrap());
        let v = t.input(Tensor::new(&[1, 2, 1], vec![1.0, 3.0]).unwrap());
        let (o, _) = scaled_dot_attention(&mut t, q, k, v).unwrap();
        assert_eq!(t.value(o).data(), &[2.0]);

        let q = t.input(random(&[1, 4], 1));
        let k = t.input(random(&[1, 1, 4], 2));
        let v = t.input(random(&[1, 1, 3], 3));
        let (o, _) = scaled_dot_attention(&mut t, q, k, v).unwrap();
        assert_eq!(t.value(o).data(), t.value(v).data());

        // One key aligned with q at 10√d_k, the rest orthogonal.
        let dk = 4usize;
        let big = 10.0 * (dk as f32).sqrt();
        let q = t.input(Tensor::new(&[1, dk], vec![big.sqrt(), 0.0, 0.0, 0.0]).unwrap());
        let mut kd = vec![0.0f32; 3 * dk];
        kd[0] = big.sqrt();
        kd[dk + 1] = 1.0;
        kd[2 * dk + 2] = 1.0;
        let k = t.input(Tensor::new(&[1, 3, dk], kd).unwrap());
        let vt = random(&[1, 3, 2], 4);
        let v = t.input(vt.clone());
        let (o, w) = scaled_dot_attention(&mut t, q, k, v).unwrap();
        for j in 0..2 {
            assert!((t.value(o).data()[j] - vt.data()[j]).abs() < 1e-3);
        }
        let s: f32 = t.value(w).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);

        let q = t.input(Tensor::zeros(&[1, 0]));
        let k = t.input(Tensor::zeros(&[1, 2, 0]));
        let v = t.input(Tensor::zeros(&[1, 2, 1]));
        assert!(scaled_dot_attention(&mut t, q, k, v).is_err());
    }

    #[test]
    fn attention_grad_check() {
        let mut store = ParamStore::new();
        let mut r = rng(20);
        let q = store.add_uniform("q", &[2, 4], 1.0, &mut r);
        let k = store.add_uniform("k", &[2, 3, 4], 1.0, &mut r);
        let v = store.add_uniform("v", &[2, 3, 5], 1.0, &mut r);
        let err = grad_check(&mut store, 1e-3, |t| {
            let (qv, kv, vv) = (t.param(q), t.param(k), t.param(v));
            let (o, _) = scaled_dot_attention(t, qv, kv, vv).unwrap();
            probe(t, o, 21)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn norm_and_reduction_grad_check() {
        let mut store = ParamStore::new();
        let mut r = rng(30);
        let x = store.add_uniform("x", &[2, 3, 2, 2], 1.0, &mut r);
        let gn = GroupNorm::new(&mut store, "gn", 3);
        let err = grad_check(&mut store, 1e-3, |t| {
            let xv = t.param(x);
            let y = gn.forward(t, xv);
            let p = t.global_avg_pool(y);
            let m = t.mean_axis(y, 1);
            let a = probe(t, p, 31);
            let b = probe(t, m, 32);
            t.add(a, b)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn gaussian_head_examples() {
        let mut store = ParamStore::new();
        let head = GaussianHead::new(&mut store, "h", 5, 2, &mut rng(0));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut t = Tape::new(&store);
        let x = t.input(random(&[1, 5], 1));
        let (mu, sigma) = head.forward(&mut t, x);
        assert_eq!(t.value(mu).data(), &[0.0, 0.0]);
        for &s in t.value(sigma).data() {
            assert!((s as f64 - (2f64.ln() + 1e-3)).abs() < 1e-6);
        }
        let lp = gaussian_log_prob(&mut t, mu, sigma, mu);
        let s = t.value(sigma).data()[0] as f64;
        let expect = -2.0 * (s.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
        assert!((t.value(lp).data()[0] as f64 - expect).abs() < 1e-5);

        let mut r = rng(2);
        let (mut sum, mut sq) = (0.0f64, 0.0f64);
        let n = 10_000;
        for _ in 0..n {
            let a = sample_gaussian(&[0.3], &[SIGMA_FLOOR], &mut r)[0] as f64;
            sum += a;
            sq += a * a;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
        assert!(std <= 2.0 * SIGMA_FLOOR as f64, "{std}");
    }

    #[test]
    fn gaussian_terms_grad_check() {
        let mut store = ParamStore::new();
        let head = GaussianHead::new(&mut store, "h", 3, 2, &mut rng(40));
        let x = random(&[4, 3], 41);
        let a = random(&[4, 2], 42);
        let err = grad_check(&mut store, 1e-3, |t| {
            let xv = t.input(x.clone());
            let (mu, sigma) = head.forward(t, xv);
            let av = t.input(a.clone());
            let lp = gaussian_log_prob(t, mu, sigma, av);
            let e = gaussian_entropy(t, sigma);
            let s = t.add(lp, e);
            let s = t.scale(s, 1e-3);
            t.sum(s)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn clipped_min_routes_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(&[3], vec![0.5, 1.0, 2.0]).unwrap());
        let mut t = Tape::new(&store);
        let x = t.param(p);
        let c = t.clamp(x, 0.8, 1.2);
        let m = t.minimum(x, c);
        let s = t.sum(m);
        let g = t.backward(s);
        // 0.5 → x is the min; 1.0 → both equal, ties go to x; 2.0 → clamped branch, zero slope.
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 1.0, 0.0]);
    }
}
