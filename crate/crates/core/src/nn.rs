//! Shared layer helpers. Weights are stored unit-variance and scaled by
//! `lr_mul / sqrt(fan_in)` at use time (equalized learning rate); biases are
//! scaled by `lr_mul`.

use pti_tensor::{Bound, Graph, ParamStore, Tensor, Var};
use rand::Rng;

pub const LRELU_SLOPE: f32 = 0.2;
pub const LRELU_GAIN: f32 = std::f32::consts::SQRT_2;

pub fn init_conv<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) {
    store.insert(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

pub fn init_linear<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    din: usize,
    dout: usize,
    lr_mul: f32,
    bias_init: f32,
    rng: &mut R,
) {
    let w = Tensor::randn(&[dout, din], rng).map(|v| v / lr_mul);
    store.insert(format!("{name}.weight"), w);
    store.insert(format!("{name}.bias"), Tensor::full(&[dout], bias_init / lr_mul));
}

/// Weight variable scaled by `lr_mul / sqrt(fan_in)`.
pub fn scaled_weight(g: &mut Graph, p: &Bound, name: &str, lr_mul: f32) -> Var {
    let w = p.var(&format!("{name}.weight"));
    let shape = g.shape(w).to_vec();
    let fan_in: usize = shape[1..].iter().product();
    g.scale(w, lr_mul / (fan_in as f32).sqrt())
}

pub fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    let w = scaled_weight(g, p, name, 1.0);
    let y = g.conv2d(x, w);
    let b = p.var(&format!("{name}.bias"));
    g.add_bias(y, b)
}

pub fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var, lr_mul: f32) -> Var {
    let w = scaled_weight(g, p, name, lr_mul);
    let y = g.linear(x, w);
    let b = p.var(&format!("{name}.bias"));
    let b = if lr_mul == 1.0 { b } else { g.scale(b, lr_mul) };
    g.add_bias(y, b)
}

/// Leaky ReLU with the variance-preserving gain.
pub fn lrelu(g: &mut Graph, x: Var) -> Var {
    let y = g.leaky_relu(x, LRELU_SLOPE);
    g.scale(y, LRELU_GAIN)
}

/// Small conv feature extractor shared by the factor regressor and identity embedder.
///
/// Three stages of `conv3×3 → lrelu → avgpool`; the post-activation map of each
/// stage is a perceptual tap.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrunkSpec {
    pub resolution: usize,
    pub channels: Vec<usize>,
}

impl TrunkSpec {
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution,
            channels: vec![16, 32, 64],
        }
    }

    pub fn feature_len(&self) -> usize {
        let r = self.resolution >> self.channels.len();
        self.channels.last().copied().unwrap_or(3) * r * r
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let mut cin = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            init_conv(store, &format!("{prefix}.conv{i}"), cin, c, 3, rng);
            cin = c;
        }
    }

    /// Returns `(taps, flattened features)` for an image batch in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, prefix: &str, images: Var) -> (Vec<Var>, Var) {
        let centered = g.scale(images, 2.0);
        let mut h = g.add_scalar(centered, -1.0);
        let mut taps = Vec::with_capacity(self.channels.len());
        for i in 0..self.channels.len() {
            let y = conv(g, p, &format!("{prefix}.conv{i}"), h);
            let y = lrelu(g, y);
            taps.push(y);
            h = g.avg_pool2x(y);
        }
        let n = g.shape(h)[0];
        let flat = g.reshape(h, &[n, self.feature_len()]);
        (taps, flat)
    }
}
