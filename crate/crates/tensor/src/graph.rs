//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Node indices are a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Reductions keep an `f64` copy of their value so scalar losses compose
//! without `f32` rounding.

use crate::kernels::{self, gemm};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MulChannels(Var, Var),
    AddBias(Var, Var),
    AddNoise { x: Var, noise: Var, gain: Var },
    Conv2d { x: Var, w: Var },
    Linear(Var, Var),
    Upsample2x(Var),
    AvgPool2x(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MeanSquaredDiff(Var, Var),
    ChannelUnitNorm(Var, f32),
    Demod { w: Var, s: Var },
    PixelNorm(Var),
    Reshape(Var),
    BroadcastBatch(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    MeanOf(Vec<Var>),
}

struct Node {
    value: Tensor,
    scalar: Option<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`]. Only leaves are kept.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], scalar: Option<f64>) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            scalar,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            scalar: None,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            scalar: None,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Scalar value of a one-element node, in `f64` when the producing op tracked it.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        assert_eq!(node.value.numel(), 1, "scalar() on a non-scalar node");
        node.scalar.unwrap_or(node.value.data()[0] as f64)
    }

    fn scalar_of(&self, v: Var) -> Option<f64> {
        let node = &self.nodes[v.0];
        if node.value.numel() == 1 {
            Some(node.scalar.unwrap_or(node.value.data()[0] as f64))
        } else {
            None
        }
    }

    fn scalar_tensor(value: f64, shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![value as f32])
    }

    // ---- elementwise -------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32, fs: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let scalar = match (self.scalar_of(a), self.scalar_of(b)) {
            (Some(x), Some(y)) => Some(fs(x, y)),
            _ => None,
        };
        let out = match scalar {
            Some(s) => Self::scalar_tensor(s, ta.shape()),
            None => Tensor::new(
                ta.shape(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
        };
        self.push(out, op, &[a, b], scalar)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let scalar = self.scalar_of(a).map(|s| s * c as f64);
        let out = match scalar {
            Some(s) => Self::scalar_tensor(s, self.shape(a)),
            None => self.value(a).map(|v| v * c),
        };
        self.push(out, Op::Scale(a, c), &[a], scalar)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let scalar = self.scalar_of(a).map(|s| s + c as f64);
        let out = match scalar {
            Some(s) => Self::scalar_tensor(s, self.shape(a)),
            None => self.value(a).map(|v| v + c),
        };
        self.push(out, Op::AddScalar(a), &[a], scalar)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope), &[a], None)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::tanh);
        self.push(out, Op::Tanh(a), &[a], None)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.push(out, Op::Softplus(a), &[a], None)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push(out, Op::Reshape(a), &[a], None)
    }

    /// Repeats a `[1, ..]` tensor `n` times along the batch axis.
    pub fn broadcast_batch(&mut self, a: Var, n: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.dim(0), 1, "broadcast_batch needs batch size 1");
        let mut shape = ta.shape().to_vec();
        shape[0] = n;
        let out = Tensor::new(&shape, ta.data().repeat(n));
        self.push(out, Op::BroadcastBatch(a), &[a], None)
    }

    // ---- channel broadcasts ------------------------------------------

    /// `x[n, c, ..] * s[n or 0, c]`
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.value(x), self.value(s));
        let (n, c) = (tx.dim(0), tx.dim(1));
        let sp = spatial(tx.shape()).max(1);
        assert_eq!(ts.dim(1), c, "mul_channels channel mismatch");
        assert!(ts.dim(0) == n || ts.dim(0) == 1, "mul_channels batch mismatch");
        let sb = ts.dim(0);
        let mut out = tx.clone();
        let od = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let f = ts.data()[(if sb == 1 { 0 } else { ni }) * c + ci];
                for v in &mut od[(ni * c + ci) * sp..(ni * c + ci + 1) * sp] {
                    *v *= f;
                }
            }
        }
        self.push(out, Op::MulChannels(x, s), &[x, s], None)
    }

    /// `x[n, c, ..] + b[c]`
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let (n, c) = (tx.dim(0), tx.dim(1));
        assert_eq!(tb.numel(), c, "add_bias channel mismatch");
        let sp = spatial(tx.shape()).max(1);
        let mut out = tx.clone();
        let od = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let f = tb.data()[ci];
                for v in &mut od[(ni * c + ci) * sp..(ni * c + ci + 1) * sp] {
                    *v += f;
                }
            }
        }
        self.push(out, Op::AddBias(x, b), &[x, b], None)
    }

    /// `x[n, c, h, w] + gain · noise[n or 0, 0, h, w]`
    pub fn add_noise(&mut self, x: Var, noise: Var, gain: Var) -> Var {
        let (tx, tn, tg) = (self.value(x), self.value(noise), self.value(gain));
        let (n, c) = (tx.dim(0), tx.dim(1));
        let sp = spatial(tx.shape());
        assert_eq!(tn.numel() % sp, 0, "noise spatial mismatch");
        let nb = tn.numel() / sp;
        assert!(nb == 1 || nb == n, "noise batch mismatch");
        let g = tg.data()[0];
        let mut out = tx.clone();
        let od = out.data_mut();
        for ni in 0..n {
            let nm = &tn.data()[(if nb == 1 { 0 } else { ni }) * sp..][..sp];
            for ci in 0..c {
                for (v, &z) in od[(ni * c + ci) * sp..(ni * c + ci + 1) * sp].iter_mut().zip(nm) {
                    *v += g * z;
                }
            }
        }
        self.push(out, Op::AddNoise { x, noise, gain }, &[x, noise, gain], None)
    }

    // ---- linear algebra ----------------------------------------------

    /// Same-size 2-D convolution, stride 1, zero padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, ci, h, wd) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let (co, k) = (tw.dim(0), tw.dim(2));
        assert_eq!(tw.dim(1), ci, "conv2d input channel mismatch");
        let hw = h * wd;
        let kk = ci * k * k;
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        let mut col = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
        for ni in 0..n {
            let xs = &tx.data()[ni * ci * hw..(ni + 1) * ci * hw];
            let os = &mut out.data_mut()[ni * co * hw..(ni + 1) * co * hw];
            if k == 1 {
                gemm(co, kk, hw, tw.data(), false, xs, false, 0.0, os);
            } else {
                kernels::im2col(xs, ci, h, wd, k, k / 2, &mut col);
                gemm(co, kk, hw, tw.data(), false, &col, false, 0.0, os);
            }
        }
        self.push(out, Op::Conv2d { x, w }, &[x, w], None)
    }

    /// `x[n, i] · w[o, i]ᵀ`
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, i) = (tx.dim(0), tx.numel() / tx.dim(0));
        let o = tw.dim(0);
        assert_eq!(tw.numel(), o * i, "linear shape mismatch");
        let mut out = Tensor::zeros(&[n, o]);
        gemm(n, i, o, tx.data(), false, tw.data(), true, 0.0, out.data_mut());
        self.push(out, Op::Linear(x, w), &[x, w], None)
    }

    // ---- resampling --------------------------------------------------

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for p in 0..n * c {
            kernels::upsample_plane(
                &tx.data()[p * h * w..(p + 1) * h * w],
                h,
                w,
                &mut out.data_mut()[p * 4 * h * w..(p + 1) * 4 * h * w],
            );
        }
        self.push(out, Op::Upsample2x(x), &[x], None)
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
        let q = (h / 2) * (w / 2);
        for p in 0..n * c {
            kernels::avgpool_plane(
                &tx.data()[p * h * w..(p + 1) * h * w],
                h,
                w,
                &mut out.data_mut()[p * q..(p + 1) * q],
            );
        }
        self.push(out, Op::AvgPool2x(x), &[x], None)
    }

    // ---- normalizations ----------------------------------------------

    /// Divides every `(n, pixel)` channel vector by its L2 norm plus `eps`.
    pub fn channel_unit_norm(&mut self, x: Var, eps: f32) -> Var {
        let tx = self.value(x);
        let (n, c) = (tx.dim(0), tx.dim(1));
        let sp = spatial(tx.shape()).max(1);
        let mut out = tx.clone();
        let d = tx.data();
        let od = out.data_mut();
        for ni in 0..n {
            for p in 0..sp {
                let mut ss = 0.0f32;
                for ci in 0..c {
                    let v = d[(ni * c + ci) * sp + p];
                    ss += v * v;
                }
                let inv = 1.0 / (ss.sqrt() + eps);
                for ci in 0..c {
                    od[(ni * c + ci) * sp + p] *= inv;
                }
            }
        }
        self.push(out, Op::ChannelUnitNorm(x, eps), &[x], None)
    }

    /// Row-wise `x / sqrt(mean(x²) + 1e-8)` on `[n, d]`.
    pub fn pixel_norm(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.dim(0);
        let d = tx.numel() / n;
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let r = 1.0 / (ms + 1e-8).sqrt();
            row.iter_mut().for_each(|v| *v *= r);
        }
        self.push(out, Op::PixelNorm(x), &[x], None)
    }

    /// Demodulation coefficients `1 / sqrt(Σ_{i,k} (w[o,i,k] · s[n,i])² + eps)` as `[n, o]`.
    pub fn demod(&mut self, w: Var, s: Var, eps: f32) -> Var {
        let (tw, ts) = (self.value(w), self.value(s));
        let (o, i) = (tw.dim(0), tw.dim(1));
        let kk = tw.numel() / (o * i);
        let n = ts.dim(0);
        assert_eq!(ts.dim(1), i, "demod style width mismatch");
        let q = kernel_energy(tw.data(), o, i, kk);
        let mut out = Tensor::zeros(&[n, o]);
        for ni in 0..n {
            let srow = &ts.data()[ni * i..(ni + 1) * i];
            for oi in 0..o {
                let e: f32 = q[oi * i..(oi + 1) * i]
                    .iter()
                    .zip(srow)
                    .map(|(&qv, &sv)| qv * sv * sv)
                    .sum();
                out.data_mut()[ni * o + oi] = 1.0 / (e + eps).sqrt();
            }
        }
        self.push(out, Op::Demod { w, s }, &[w, s], None)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x], Some(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s as f32), Op::Mean(x), &[x], Some(s))
    }

    /// `mean((a - b)²)` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum::<f64>()
            / ta.numel().max(1) as f64;
        self.push(Tensor::scalar(s as f32), Op::MeanSquaredDiff(a, b), &[a, b], Some(s))
    }

    /// Mean softmax cross-entropy of `logits[n, k]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let tl = self.value(logits);
        let (n, k) = (tl.dim(0), tl.dim(1));
        assert_eq!(labels.len(), n, "label count mismatch");
        let mut total = 0.0f64;
        for (ni, &lab) in labels.iter().enumerate() {
            let row = &tl.data()[ni * k..(ni + 1) * k];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            total += lse - row[lab] as f64;
        }
        let s = total / n as f64;
        self.push(
            Tensor::scalar(s as f32),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
            Some(s),
        )
    }

    /// Mean of scalar nodes, summed pairwise.
    pub fn mean_of(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "mean_of needs at least one term");
        let vals: Vec<f64> = items.iter().map(|&v| self.scalar(v)).collect();
        let s = kernels::pairwise_sum(&vals) / vals.len() as f64;
        self.push(Tensor::scalar(s as f32), Op::MeanOf(items.to_vec()), items, Some(s))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Returns gradients for leaves that need them.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    Self::acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    Self::acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    Self::acc(grads, *a, Tensor::new(ta.shape(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    Self::acc(grads, *b, Tensor::new(tb.shape(), d));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let c = *c;
                    Self::acc(grads, *a, g.map(|v| v * c));
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    Self::acc(grads, *a, g.clone());
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    Self::acc(grads, *a, g.clone().reshape(self.shape(*a)));
                }
            }
            Op::BroadcastBatch(a) => {
                if self.wants(*a) {
                    let m = self.value(*a).numel();
                    let mut ga = Tensor::zeros(self.shape(*a));
                    for chunk in g.data().chunks(m) {
                        for (d, &v) in ga.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    Self::acc(grads, *a, ga);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { gv * slope })
                        .collect();
                    Self::acc(grads, *a, Tensor::new(ta.shape(), d));
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * (1.0 - y * y))
                        .collect();
                    Self::acc(grads, *a, Tensor::new(node.value.shape(), d));
                }
            }
            Op::Softplus(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| gv / (1.0 + (-x).exp()))
                        .collect();
                    Self::acc(grads, *a, Tensor::new(ta.shape(), d));
                }
            }
            Op::MulChannels(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let (n, c) = (tx.dim(0), tx.dim(1));
                let sp = spatial(tx.shape()).max(1);
                let sb = ts.dim(0);
                let srow = |ni: usize| if sb == 1 { 0 } else { ni };
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for ni in 0..n {
                        for ci in 0..c {
                            let f = ts.data()[srow(ni) * c + ci];
                            for v in &mut gx.data_mut()[(ni * c + ci) * sp..(ni * c + ci + 1) * sp] {
                                *v *= f;
                            }
                        }
                    }
                    Self::acc(grads, *x, gx);
                }
                if self.wants(*s) {
                    let mut gs = Tensor::zeros(ts.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            let r = (ni * c + ci) * sp..(ni * c + ci + 1) * sp;
                            let dot: f32 = g.data()[r.clone()]
                                .iter()
                                .zip(&tx.data()[r])
                                .map(|(a, b)| a * b)
                                .sum();
                            gs.data_mut()[srow(ni) * c + ci] += dot;
                        }
                    }
                    Self::acc(grads, *s, gs);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    Self::acc(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let tx = self.value(*x);
                    let (n, c) = (tx.dim(0), tx.dim(1));
                    let sp = spatial(tx.shape()).max(1);
                    let mut gb = Tensor::zeros(self.shape(*b));
                    for ni in 0..n {
                        for ci in 0..c {
                            let s: f32 = g.data()[(ni * c + ci) * sp..(ni * c + ci + 1) * sp].iter().sum();
                            gb.data_mut()[ci] += s;
                        }
                    }
                    Self::acc(grads, *b, gb);
                }
            }
            Op::AddNoise { x, noise, gain } => {
                let tx = self.value(*x);
                let tn = self.value(*noise);
                let (n, c) = (tx.dim(0), tx.dim(1));
                let sp = spatial(tx.shape());
                let nb = tn.numel() / sp;
                let gval = self.value(*gain).data()[0];
                if self.wants(*x) {
                    Self::acc(grads, *x, g.clone());
                }
                let want_n = self.wants(*noise);
                let want_g = self.wants(*gain);
                if want_n || want_g {
                    let mut gn = Tensor::zeros(tn.shape());
                    let mut gg = 0.0f64;
                    for ni in 0..n {
                        let off = (if nb == 1 { 0 } else { ni }) * sp;
                        for ci in 0..c {
                            let gs = &g.data()[(ni * c + ci) * sp..(ni * c + ci + 1) * sp];
                            let ns = &tn.data()[off..off + sp];
                            if want_g {
                                gg += gs.iter().zip(ns).map(|(a, b)| (a * b) as f64).sum::<f64>();
                            }
                            if want_n {
                                for (d, &v) in gn.data_mut()[off..off + sp].iter_mut().zip(gs) {
                                    *d += v * gval;
                                }
                            }
                        }
                    }
                    if want_n {
                        Self::acc(grads, *noise, gn);
                    }
                    if want_g {
                        Self::acc(grads, *gain, Tensor::full(self.shape(*gain), gg as f32));
                    }
                }
            }
            Op::Conv2d { x, w } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, ci, h, wd) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
                let (co, k) = (tw.dim(0), tw.dim(2));
                let hw = h * wd;
                let kk = ci * k * k;
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = if want_x { Some(Tensor::zeros(tx.shape())) } else { None };
                let mut gw = if want_w { Some(Tensor::zeros(tw.shape())) } else { None };
                let mut col = vec![0.0; kk * hw];
                for ni in 0..n {
                    let gs = &g.data()[ni * co * hw..(ni + 1) * co * hw];
                    let xs = &tx.data()[ni * ci * hw..(ni + 1) * ci * hw];
                    if let Some(gw) = gw.as_mut() {
                        if k == 1 {
                            gemm(co, hw, kk, gs, false, xs, true, 1.0, gw.data_mut());
                        } else {
                            kernels::im2col(xs, ci, h, wd, k, k / 2, &mut col);
                            gemm(co, hw, kk, gs, false, &col, true, 1.0, gw.data_mut());
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx.data_mut()[ni * ci * hw..(ni + 1) * ci * hw];
                        if k == 1 {
                            gemm(kk, co, hw, tw.data(), true, gs, false, 1.0, dst);
                        } else {
                            gemm(kk, co, hw, tw.data(), true, gs, false, 0.0, &mut col);
                            kernels::col2im(&col, ci, h, wd, k, k / 2, dst);
                        }
                    }
                }
                if let Some(gx) = gx {
                    Self::acc(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    Self::acc(grads, *w, gw);
                }
            }
            Op::Linear(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, i) = (tx.dim(0), tx.numel() / tx.dim(0));
                let o = tw.dim(0);
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(tx.shape());
                    gemm(n, o, i, g.data(), false, tw.data(), false, 0.0, gx.data_mut());
                    Self::acc(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = Tensor::zeros(tw.shape());
                    gemm(o, n, i, g.data(), true, tx.data(), false, 0.0, gw.data_mut());
                    Self::acc(grads, *w, gw);
                }
            }
            Op::Upsample2x(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let (n, c, h, w) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
                    let mut gx = Tensor::zeros(tx.shape());
                    for p in 0..n * c {
                        kernels::upsample_plane_t(
                            &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w],
                            h,
                            w,
                            &mut gx.data_mut()[p * h * w..(p + 1) * h * w],
                        );
                    }
                    Self::acc(grads, *x, gx);
                }
            }
            Op::AvgPool2x(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let (n, c, h, w) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
                    let q = (h / 2) * (w / 2);
                    let mut gx = Tensor::zeros(tx.shape());
                    for p in 0..n * c {
                        kernels::avgpool_plane_t(
                            &g.data()[p * q..(p + 1) * q],
                            h,
                            w,
                            &mut gx.data_mut()[p * h * w..(p + 1) * h * w],
                        );
                    }
                    Self::acc(grads, *x, gx);
                }
            }
            Op::ChannelUnitNorm(x, eps) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let (n, c) = (tx.dim(0), tx.dim(1));
                    let sp = spatial(tx.shape()).max(1);
                    let d = tx.data();
                    let mut gx = Tensor::zeros(tx.shape());
                    for ni in 0..n {
                        for p in 0..sp {
                            let at = |ci: usize| (ni * c + ci) * sp + p;
                            let mut ss = 0.0f32;
                            let mut gdot = 0.0f32;
                            for ci in 0..c {
                                ss += d[at(ci)] * d[at(ci)];
                                gdot += g.data()[at(ci)] * d[at(ci)];
                            }
                            let nrm = ss.sqrt();
                            let den = nrm + eps;
                            let corr = if nrm > 0.0 { gdot / (nrm * den * den) } else { 0.0 };
                            for ci in 0..c {
                                gx.data_mut()[at(ci)] = g.data()[at(ci)] / den - d[at(ci)] * corr;
                            }
                        }
                    }
                    Self::acc(grads, *x, gx);
                }
            }
            Op::PixelNorm(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let n = tx.dim(0);
                    let dd = tx.numel() / n;
                    let mut gx = Tensor::zeros(tx.shape());
                    for ni in 0..n {
                        let xr = &tx.data()[ni * dd..(ni + 1) * dd];
                        let gr = &g.data()[ni * dd..(ni + 1) * dd];
                        let ms = xr.iter().map(|v| v * v).sum::<f32>() / dd as f32;
                        let r = 1.0 / (ms + 1e-8).sqrt();
                        let gdot: f32 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let corr = r * r * r * gdot / dd as f32;
                        for (j, out) in gx.data_mut()[ni * dd..(ni + 1) * dd].iter_mut().enumerate() {
                            *out = gr[j] * r - xr[j] * corr;
                        }
                    }
                    Self::acc(grads, *x, gx);
                }
            }
            Op::Demod { w, s } => {
                let (tw, ts) = (self.value(*w), self.value(*s));
                let (o, i) = (tw.dim(0), tw.dim(1));
                let kk = tw.numel() / (o * i);
                let n = ts.dim(0);
                let d = node.value.data();
                // coef[n, o] = g · ∂d/∂E = -½ g d³
                let coef: Vec<f32> = g
                    .data()
                    .iter()
                    .zip(d)
                    .map(|(&gv, &dv)| -0.5 * gv * dv * dv * dv)
                    .collect();
                if self.wants(*s) {
                    let q = kernel_energy(tw.data(), o, i, kk);
                    let mut gs = Tensor::zeros(ts.shape());
                    for ni in 0..n {
                        for ii in 0..i {
                            let sv = ts.data()[ni * i + ii];
                            let acc: f32 = (0..o).map(|oi| coef[ni * o + oi] * q[oi * i + ii]).sum();
                            gs.data_mut()[ni * i + ii] = 2.0 * sv * acc;
                        }
                    }
                    Self::acc(grads, *s, gs);
                }
                if self.wants(*w) {
                    let mut gw = Tensor::zeros(tw.shape());
                    for oi in 0..o {
                        for ii in 0..i {
                            let f: f32 = (0..n)
                                .map(|ni| {
                                    let sv = ts.data()[ni * i + ii];
                                    coef[ni * o + oi] * sv * sv
                                })
                                .sum();
                            let base = (oi * i + ii) * kk;
                            for kx in 0..kk {
                                gw.data_mut()[base + kx] = 2.0 * f * tw.data()[base + kx];
                            }
                        }
                    }
                    Self::acc(grads, *w, gw);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    Self::acc(grads, *x, Tensor::full(self.shape(*x), g.data()[0]));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel() as f32;
                    Self::acc(grads, *x, Tensor::full(self.shape(*x), g.data()[0] / n));
                }
            }
            Op::MeanSquaredDiff(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let f = 2.0 * g.data()[0] / ta.numel() as f32;
                let diff: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| f * (x - y)).collect();
                if self.wants(*b) {
                    Self::acc(grads, *b, Tensor::new(tb.shape(), diff.iter().map(|v| -v).collect()));
                }
                if self.wants(*a) {
                    Self::acc(grads, *a, Tensor::new(ta.shape(), diff));
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.wants(*logits) {
                    let tl = self.value(*logits);
                    let (n, k) = (tl.dim(0), tl.dim(1));
                    let f = g.data()[0] / n as f32;
                    let mut gl = Tensor::zeros(tl.shape());
                    for (ni, &lab) in labels.iter().enumerate() {
                        let row = &tl.data()[ni * k..(ni + 1) * k];
                        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                        let z: f32 = row.iter().map(|&v| (v - m).exp()).sum();
                        for (j, out) in gl.data_mut()[ni * k..(ni + 1) * k].iter_mut().enumerate() {
                            let p = (row[j] - m).exp() / z;
                            *out = f * (p - if j == lab { 1.0 } else { 0.0 });
                        }
                    }
                    Self::acc(grads, *logits, gl);
                }
            }
            Op::MeanOf(items) => {
                let f = g.data()[0] / items.len() as f32;
                for &v in items {
                    if self.wants(v) {
                        Self::acc(grads, v, Tensor::full(self.shape(v), f));
                    }
                }
            }
        }
    }
}

/// `q[o, i] = Σ_k w[o, i, k]²`
fn kernel_energy(w: &[f32], o: usize, i: usize, kk: usize) -> Vec<f32> {
    (0..o * i)
        .map(|oi| w[oi * kk..(oi + 1) * kk].iter().map(|v| v * v).sum())
        .collect()
}
