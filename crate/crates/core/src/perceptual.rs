//! Learned perceptual distance on the factor-regressor trunk, and the noise
//! autocorrelation penalty used during inversion.
//!
//! Each tap (post-activation map of a trunk stage) is standardized per channel
//! with statistics collected once at construction, then scaled to unit norm
//! along the channel axis at every pixel. The distance sums, over taps, the
//! mean squared difference of these normalized features.

use std::path::Path;

use pti_tensor::{Graph, ParamStore, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::datagen::FactorRegressor;
use crate::error::{Error, Result};
use crate::gan::NoiseStack;
use crate::image::ImageTensor;
use crate::nn::TrunkSpec;
use crate::seed;

const NORM_EPS: f32 = 1e-8;
const KIND: &str = "perceptual-backbone";
pub const PROVENANCE: &str = "perceptual";

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualBackbone {
    trunk: TrunkSpec,
    params: ParamStore,
    /// Per tap: `1 / std` and `−mean / std` per channel.
    scale: Vec<Tensor>,
    shift: Vec<Tensor>,
}

impl PerceptualBackbone {
    /// Freezes the regressor trunk and measures tap statistics on `images`.
    pub fn from_regressor(reg: &FactorRegressor, images: &[&ImageTensor]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidParameter("need images for feature statistics".into()));
        }
        let params: ParamStore = reg
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("trunk."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let trunk = reg.trunk.clone();
        let taps = trunk.channels.len();
        let mut sums = vec![Vec::<f64>::new(); taps];
        let mut sq = vec![Vec::<f64>::new(); taps];
        let mut counts = vec![0usize; taps];
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let x = g.constant(ImageTensor::batch(chunk));
            let (tap_vars, _) = trunk.forward(&mut g, &p, "trunk", x);
            for (t, &v) in tap_vars.iter().enumerate() {
                let val = g.value(v);
                let (n, c) = (val.dim(0), val.dim(1));
                let sp = val.numel() / (n * c);
                if sums[t].is_empty() {
                    sums[t] = vec![0.0; c];
                    sq[t] = vec![0.0; c];
                }
                for ni in 0..n {
                    for ci in 0..c {
                        for &e in &val.data()[(ni * c + ci) * sp..(ni * c + ci + 1) * sp] {
                            sums[t][ci] += e as f64;
                            sq[t][ci] += (e as f64).powi(2);
                        }
                    }
                }
                counts[t] += n * sp;
            }
        }
        let mut scale = Vec::with_capacity(taps);
        let mut shift = Vec::with_capacity(taps);
        for t in 0..taps {
            let n = counts[t] as f64;
            let (mut sc, mut sh) = (Vec::new(), Vec::new());
            for ci in 0..sums[t].len() {
                let mean = sums[t][ci] / n;
                let std = (sq[t][ci] / n - mean * mean).max(0.0).sqrt().max(1e-6);
                sc.push((1.0 / std) as f32);
                sh.push((-mean / std) as f32);
            }
            let c = sc.len();
            scale.push(Tensor::new(&[1, c], sc));
            shift.push(Tensor::new(&[c], sh));
        }
        Ok(Self {
            trunk,
            params,
            scale,
            shift,
        })
    }

    pub fn resolution(&self) -> usize {
        self.trunk.resolution
    }

    /// Normalized tap features of an image batch, built into `g`.
    pub fn features_graph(&self, g: &mut Graph, images: Var) -> Vec<Var> {
        let p = self.params.bind(g, false);
        let (taps, _) = self.trunk.forward(g, &p, "trunk", images);
        taps.into_iter()
            .enumerate()
            .map(|(t, v)| {
                let s = g.constant(self.scale[t].clone());
                let b = g.constant(self.shift[t].clone());
                let y = g.mul_channels(v, s);
                let y = g.add_bias(y, b);
                g.channel_unit_norm(y, NORM_EPS)
            })
            .collect()
    }

    /// Normalized features of one image (`[1, C, h, w]` per tap).
    pub fn features(&self, image: &ImageTensor) -> Vec<Tensor> {
        self.features_batch(&[image]).remove(0)
    }

    /// Per-image normalized features; each image is processed on its own so
    /// results do not depend on batch composition.
    pub fn features_batch(&self, images: &[&ImageTensor]) -> Vec<Vec<Tensor>> {
        images
            .iter()
            .map(|im| {
                let mut g = Graph::new();
                let x = g.constant(im.to_tensor());
                let f = self.features_graph(&mut g, x);
                f.iter().map(|&v| g.value(v).clone()).collect()
            })
            .collect()
    }

    /// Distance between a graph image batch `[N, 3, R, R]` and constant target features
    /// (batch 1 or N per tap). Returns the mean over the batch.
    pub fn distance_graph(&self, g: &mut Graph, images: Var, target: &[Tensor]) -> Var {
        let feats = self.features_graph(g, images);
        let n = g.shape(images)[0];
        let terms: Vec<Var> = feats
            .iter()
            .zip(target)
            .map(|(&f, t)| {
                let t = if t.dim(0) == n {
                    g.constant(t.clone())
                } else {
                    let c = g.constant(t.clone());
                    g.broadcast_batch(c, n)
                };
                g.mse(f, t)
            })
            .collect();
        sum_terms(g, &terms)
    }

    pub fn distance(&self, x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
        if x.resolution() != y.resolution() || x.resolution() != self.resolution() {
            return Err(Error::ShapeMismatch(format!(
                "perceptual distance at {}px given {}px and {}px",
                self.resolution(),
                x.resolution(),
                y.resolution()
            )));
        }
        Ok(feature_distance(&self.features(x), &self.features(y)))
    }

    /// SHA-256 of all weights and statistics, for freeze checks.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.params.iter() {
            h.update(n.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        for t in self.scale.iter().chain(&self.shift) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(KIND, PROVENANCE, serde_json::json!({ "trunk": self.trunk }), ParamStore::new());
        c.put_group("params", &self.params);
        for t in 0..self.scale.len() {
            c.arrays.insert(format!("stats/scale{t}"), self.scale[t].clone());
            c.arrays.insert(format!("stats/shift{t}"), self.shift[t].clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(KIND)?;
        if c.provenance != PROVENANCE {
            return Err(Error::Provenance {
                expected: PROVENANCE.into(),
                found: c.provenance.clone(),
            });
        }
        let trunk: TrunkSpec = serde_json::from_value(c.metadata["trunk"].clone())?;
        let stats = c.group("stats");
        let taps = trunk.channels.len();
        let get = |name: String| {
            stats
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing `{name}`")))
        };
        let scale = (0..taps).map(|t| get(format!("scale{t}"))).collect::<Result<_>>()?;
        let shift = (0..taps).map(|t| get(format!("shift{t}"))).collect::<Result<_>>()?;
        Ok(Self {
            trunk,
            params: c.group("params"),
            scale,
            shift,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn sum_terms(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    acc
}

/// Distance between two precomputed feature sets.
pub fn feature_distance(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| ((p - q) as f64).powi(2))
                .sum::<f64>()
                / x.numel() as f64
        })
        .sum()
}

pub fn perceptual_distance(backbone: &PerceptualBackbone, x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    backbone.distance(x, y)
}

// ---- noise regularization ------------------------------------------------

fn pool2(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            out[y * w2 + x] = 0.25
                * (src[2 * y * w + 2 * x]
                    + src[2 * y * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, h2, w2)
}

/// `(mean(n · shift_x n), mean(n · shift_y n))` with circular one-pixel shifts.
fn autocorr(m: &[f64], h: usize, w: usize) -> (f64, f64) {
    let (mut hx, mut vy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = m[y * w + x];
            hx += v * m[y * w + (x + w - 1) % w];
            vy += v * m[((y + h - 1) % h) * w + x];
        }
    }
    let n = (h * w) as f64;
    (hx / n, vy / n)
}

/// Value and gradient of the penalty for one `h × w` map.
///
/// Levels: the map itself, then 2×2 average-pooled copies while they are at
/// least 8×8. Each level contributes `mean(n·shift_x n)² + mean(n·shift_y n)²`.
pub fn map_regularization(map: &[f32], h: usize, w: usize) -> (f64, Vec<f32>) {
    let mut levels = vec![(map.iter().map(|&v| v as f64).collect::<Vec<f64>>(), h, w)];
    loop {
        let (m, lh, lw) = levels.last().expect("level");
        if lh / 2 < 8 || lw / 2 < 8 {
            break;
        }
        let next = pool2(m, *lh, *lw);
        levels.push(next);
    }
    let mut value = 0.0;
    let mut grad: Vec<f64> = Vec::new();
    for (m, lh, lw) in levels.iter().rev() {
        let (lh, lw) = (*lh, *lw);
        // upsample the coarser gradient through the pooling adjoint
        let mut g = vec![0.0; lh * lw];
        if !grad.is_empty() {
            let w2 = lw / 2;
            for y in 0..(lh / 2) * 2 {
                for x in 0..w2 * 2 {
                    g[y * lw + x] = 0.25 * grad[(y / 2) * w2 + x / 2];
                }
            }
        }
        let (a, b) = autocorr(m, lh, lw);
        value += a * a + b * b;
        let n = (lh * lw) as f64;
        for y in 0..lh {
            for x in 0..lw {
                let left = m[y * lw + (x + lw - 1) % lw];
                let right = m[y * lw + (x + 1) % lw];
                let up = m[((y + lh - 1) % lh) * lw + x];
                let down = m[((y + 1) % lh) * lw + x];
                g[y * lw + x] += 2.0 * a * (left + right) / n + 2.0 * b * (up + down) / n;
            }
        }
        grad = g;
    }
    (value, grad.into_iter().map(|v| v as f32).collect())
}

/// Sum of [`map_regularization`] over every map of the stack.
pub fn noise_regularization(noise: &NoiseStack) -> f64 {
    noise
        .maps()
        .iter()
        .map(|m| {
            let s = m.shape();
            map_regularization(m.data(), s[s.len() - 2], s[s.len() - 1]).0
        })
        .sum()
}

/// Value and per-map gradients of [`noise_regularization`].
pub fn noise_regularization_grad(noise: &NoiseStack) -> (f64, Vec<Tensor>) {
    let mut total = 0.0;
    let grads = noise
        .maps()
        .iter()
        .map(|m| {
            let s = m.shape();
            let (v, g) = map_regularization(m.data(), s[s.len() - 2], s[s.len() - 1]);
            total += v;
            Tensor::new(s, g)
        })
        .collect();
    (total, grads)
}

/// Shifts and scales every map to zero mean and unit (population) variance.
/// A map with zero variance is replaced by white noise from stream
/// `(seed, layer)`, normalized the same way.
pub fn renormalize_noise(noise: &NoiseStack, seed: u64) -> NoiseStack {
    let maps = noise
        .maps()
        .iter()
        .enumerate()
        .map(|(l, m)| {
            normalize_map(m).unwrap_or_else(|| {
                let fresh = Tensor::randn(m.shape(), &mut seed::item_rng(seed, "noise-refill", l as u64));
                normalize_map(&fresh).unwrap_or(fresh)
            })
        })
        .collect();
    NoiseStack::new(maps)
}

fn normalize_map(m: &Tensor) -> Option<Tensor> {
    let n = m.numel() as f64;
    let mean = m.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = m.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var <= 1e-20 {
        return None;
    }
    let inv = 1.0 / var.sqrt();
    Some(Tensor::new(
        m.shape(),
        m.data().iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_stats(t: &Tensor) -> (f64, f64) {
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn ones_map_at_8x8_gives_one_per_direction() {
        let (v, _) = map_regularization(&[1.0; 64], 8, 8);
        assert_eq!(v, 2.0);
    }

    #[test]
    fn zero_stack_has_zero_penalty() {
        let s = NoiseStack::new(vec![Tensor::zeros(&[1, 1, 4, 4]), Tensor::zeros(&[1, 1, 32, 32])]);
        assert_eq!(noise_regularization(&s), 0.0);
    }

    #[test]
    fn white_noise_penalty_is_small_and_shrinks_with_size() {
        let mut means = Vec::new();
        for size in [16usize, 32, 100] {
            let mut acc = 0.0;
            for s in 0..100 {
                let t = Tensor::randn(&[1, 1, size, size], &mut seed::rng(s));
                acc += map_regularization(t.data(), size, size).0;
            }
            means.push(acc / 100.0);
        }
        assert!(means[2] < 0.01, "{means:?}");
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let t = Tensor::randn(&[1, 1, 16, 16], &mut seed::rng(3)).map(|v| v + 0.3);
        let (_, g) = map_regularization(t.data(), 16, 16);
        let h = 1e-3;
        for i in [0usize, 17, 100, 255] {
            let mut p: Vec<f32> = t.data().to_vec();
            p[i] += h;
            let mut m: Vec<f32> = t.data().to_vec();
            m[i] -= h;
            let fd = (map_regularization(&p, 16, 16).0 - map_regularization(&m, 16, 16).0) / (2.0 * h as f64);
            assert!((fd - g[i] as f64).abs() <= 1e-2 * fd.abs().max(1e-4), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn renormalize_contracts() {
        let m = Tensor::randn(&[1, 1, 16, 16], &mut seed::rng(1)).map(|v| 5.0 + 2.0 * v);
        let s = renormalize_noise(&NoiseStack::new(vec![m, Tensor::full(&[1, 1, 8, 8], 3.0)]), 9);
        for t in s.maps() {
            let (mean, std) = map_stats(t);
            assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6, "{mean} {std}");
        }
        let again = renormalize_noise(&s, 9);
        for (a, b) in s.maps().iter().zip(again.maps()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }
}
