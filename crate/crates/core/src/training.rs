//! Adversarial pretraining: non-saturating logistic loss, lazy R1 on reals,
//! Adam with β₁ = 0, and an exponential moving average of the generator.
//!
//! The R1 weight gradient needs `∇θ ‖∇ₓD‖²`. It is obtained without
//! second-order autodiff as a central difference of first-order gradients:
//! with `v = ∇ₓD(x)`, `∇θ (∇ₓD · v) ≈ [∇θD(x + εv) − ∇θD(x − εv)] / 2ε`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pti_tensor::{Adam, AdamConfig, Bound, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::gan::{
    auto_alpha, mapping_forward, mean_latent, sample_z, synthesis_forward, GeneratorArch, GeneratorCheckpoint,
    Provenance,
};
use crate::image::ImageTensor;
use crate::nn;
use crate::seed;

pub const MEAN_LATENT_SAMPLES: usize = 100_000;
pub const ALPHA_AUTO_SAMPLES: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_g: f32,
    pub lr_d: f32,
    pub r1_gamma: f32,
    pub r1_every: usize,
    pub ema_half_life_images: f64,
    pub seed: u64,
    pub resolution: usize,
    pub latent_dim: usize,
    pub snapshot_every: usize,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 8,
            lr_g: 2.5e-3,
            lr_d: 2.5e-3,
            r1_gamma: 1.0,
            r1_every: 16,
            ema_half_life_images: 10_000.0,
            seed: 0,
            resolution: 32,
            latent_dim: 64,
            snapshot_every: 5_000,
            log_every: 50,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.steps > 0
            && self.batch_size > 0
            && self.lr_g > 0.0
            && self.lr_d > 0.0
            && self.r1_gamma > 0.0
            && self.r1_every > 0
            && self.ema_half_life_images > 0.0
            && self.snapshot_every > 0
            && self.log_every > 0
            && self.latent_dim > 0;
        if !positive {
            return Err(Error::InvalidParameter("pretrain settings must all be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub resolution: usize,
    /// Channels at resolution, resolution/2, …, 4.
    pub channels: Vec<usize>,
}

impl DiscriminatorArch {
    pub fn new(resolution: usize) -> Self {
        let table = [(64, 24), (32, 32), (16, 48), (8, 64), (4, 64)];
        Self {
            resolution,
            channels: table.iter().filter(|(r, _)| *r <= resolution).map(|&(_, c)| c).collect(),
        }
    }
}

/// Residual-free conv discriminator producing one logit per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub arch: DiscriminatorArch,
    pub params: ParamStore,
}

impl Discriminator {
    pub fn init(resolution: usize, seed: u64) -> Self {
        let arch = DiscriminatorArch::new(resolution);
        let mut rng = seed::item_rng(seed, "discriminator-init", 0);
        let mut params = ParamStore::new();
        let c = &arch.channels;
        nn::init_conv(&mut params, "from_rgb", 3, c[0], 1, &mut rng);
        for i in 0..c.len() - 1 {
            nn::init_conv(&mut params, &format!("b{i}"), c[i], c[i + 1], 3, &mut rng);
        }
        let last = *c.last().expect("channels");
        nn::init_conv(&mut params, "final_conv", last, last, 3, &mut rng);
        nn::init_linear(&mut params, "fc", last * 16, last, 1.0, 0.0, &mut rng);
        nn::init_linear(&mut params, "out", last, 1, 1.0, 0.0, &mut rng);
        Self { arch, params }
    }

    /// Logits `[N, 1]` for images `[N, 3, R, R]` in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var) -> Var {
        let x = g.scale(images, 2.0);
        let x = g.add_scalar(x, -1.0);
        let x = nn::conv(g, p, "from_rgb", x);
        let mut x = nn::lrelu(g, x);
        for i in 0..self.arch.channels.len() - 1 {
            let y = nn::conv(g, p, &format!("b{i}"), x);
            let y = nn::lrelu(g, y);
            x = g.avg_pool2x(y);
        }
        let y = nn::conv(g, p, "final_conv", x);
        let y = nn::lrelu(g, y);
        let n = g.shape(y)[0];
        let flat_len = g.value(y).numel() / n;
        let flat = g.reshape(y, &[n, flat_len]);
        let h = nn::linear(g, p, "fc", flat, 1.0);
        let h = nn::lrelu(g, h);
        nn::linear(g, p, "out", h, 1.0)
    }

    pub fn score(&self, images: &Tensor) -> Vec<f32> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, &p, x);
        g.value(y).data().to_vec()
    }
}

/// Per-image input gradients `∇ₓ Σ critic(x)` and the mean squared gradient norm.
pub fn input_gradient<F>(critic: F, real: &Tensor) -> Result<(Tensor, f64)>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let x = g.param(real.clone());
    let out = critic(&mut g, x);
    let total = if g.value(out).numel() == 1 { out } else { g.sum(out) };
    let grad = if g.needs_grad(total) {
        g.backward(total).take(x).unwrap_or_else(|| Tensor::zeros(real.shape()))
    } else {
        Tensor::zeros(real.shape())
    };
    if !grad.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: "non-finite discriminator input gradient".into(),
            trace: Vec::new(),
        });
    }
    let n = real.dim(0).max(1);
    Ok((grad.clone(), grad.sq_norm() / n as f64))
}

/// Mean over the batch of `‖∇ₓ critic(x)‖²`.
pub fn r1_penalty<F>(critic: F, real: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    input_gradient(critic, real).map(|(_, p)| p)
}

impl Discriminator {
    pub fn r1_penalty(&self, real: &Tensor) -> Result<f64> {
        r1_penalty(|g, x| self.score_var(g, x), real)
    }

    fn score_var(&self, g: &mut Graph, x: Var) -> Var {
        let p = self.params.bind(g, false);
        self.forward(g, &p, x)
    }

    /// Weight gradient of `Σ D(x)` and its value.
    fn weight_grad(&self, x: &Tensor) -> ParamStore {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv);
        let s = g.sum(y);
        let mut grads = g.backward(s);
        p.grads(&g, &mut grads)
    }

    /// `∇θ (mean_n ‖∇ₓD(x_n)‖²)` by a central difference along the input gradient.
    pub fn r1_weight_grad(&self, real: &Tensor) -> Result<(ParamStore, f64)> {
        let (v, penalty) = input_gradient(|g, x| self.score_var(g, x), real)?;
        let vmax = v.data().iter().fold(0.0f32, |m, a| m.max(a.abs()));
        let n = real.dim(0) as f32;
        if vmax == 0.0 {
            let zero = self.params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
            return Ok((zero, penalty));
        }
        let eps = 1e-3 / vmax;
        let mut plus = real.clone();
        plus.axpy(eps, &v);
        let mut minus = real.clone();
        minus.axpy(-eps, &v);
        let gp = self.weight_grad(&plus);
        let gm = self.weight_grad(&minus);
        // d/dθ ‖g‖² = 2 Hᵀ g, averaged over the batch
        let scale = 2.0 / (2.0 * eps * n);
        let out = gp
            .iter()
            .map(|(k, a)| {
                let b = gm.tensor(k);
                let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * scale).collect();
                (k.clone(), Tensor::new(a.shape(), d))
            })
            .collect();
        Ok((out, penalty))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    pub r1: f64,
}

/// Outcome of [`pretrain`]: the EMA generator, the discriminator and the loss log.
pub struct PretrainOutput {
    pub generator: GeneratorCheckpoint,
    pub discriminator: Discriminator,
    pub log: Vec<LogRow>,
    pub snapshots: Vec<PathBuf>,
}

fn divergence(step: usize, what: &str, log: &[LogRow]) -> Error {
    Error::Divergence {
        step,
        what: what.into(),
        trace: log.iter().map(|r| r.g_loss).collect(),
    }
}

fn real_batch(data: &[Sample], cfg: &PretrainConfig, step: usize) -> Tensor {
    let mut rng = seed::item_rng(cfg.seed, "pretrain-batch", step as u64);
    let imgs: Vec<&ImageTensor> = (0..cfg.batch_size)
        .map(|_| &data[rng.gen_range(0..data.len())].image)
        .collect();
    ImageTensor::batch(&imgs)
}

fn z_batch(cfg: &PretrainConfig, step: usize, tag: u64) -> Tensor {
    let d = cfg.latent_dim;
    let data = (0..cfg.batch_size as u64)
        .flat_map(|i| sample_z(seed::derive(cfg.seed, tag), step as u64 * 1024 + i, d))
        .collect();
    Tensor::new(&[cfg.batch_size, d], data)
}

fn noise_batch(g: &mut Graph, arch: &GeneratorArch, n: usize, cfg: &PretrainConfig, step: usize, tag: u64) -> Vec<Var> {
    let mut rng = seed::item_rng(cfg.seed ^ tag, "pretrain-noise", step as u64);
    arch.noise_shapes()
        .iter()
        .map(|s| g.constant(Tensor::randn(&[n, 1, s[2], s[3]], &mut rng)))
        .collect()
}

/// Generator forward from `z` in a graph.
fn generate(
    g: &mut Graph,
    ckpt: &GeneratorCheckpoint,
    trainable: bool,
    z: Tensor,
    noise: Vec<Var>,
) -> (Var, Option<(Bound, Bound)>) {
    let pm = ckpt.mapping.bind(g, trainable);
    let ps = ckpt.synthesis.bind(g, trainable);
    let zv = g.constant(z);
    let w = mapping_forward(g, &ckpt.arch, &pm, zv);
    let ws = vec![w; ckpt.num_layers()];
    let img = synthesis_forward(g, &ckpt.arch, &ps, &ws, &noise);
    (img, trainable.then_some((pm, ps)))
}

/// Trains a generator on `data`; writes `train_log.csv` and EMA snapshots under `out_dir` when given.
pub fn pretrain(data: &[Sample], cfg: &PretrainConfig, out_dir: Option<&Path>) -> Result<PretrainOutput> {
    cfg.validate()?;
    if data.len() < 5000 {
        return Err(Error::InvalidParameter(format!(
            "pretraining needs >= 5000 images, got {}",
            data.len()
        )));
    }
    if data.iter().any(|s| s.image.resolution() != cfg.resolution) {
        return Err(Error::ShapeMismatch(format!("dataset is not at {}px", cfg.resolution)));
    }
    let arch = GeneratorArch::new(cfg.resolution, cfg.latent_dim)?;
    let mut gen = GeneratorCheckpoint::init(arch, cfg.seed);
    let mut ema = gen.clone();
    let mut disc = Discriminator::init(cfg.resolution, cfg.seed);
    let adam = |lr| AdamConfig::new(lr).with_betas(0.0, 0.99);
    let mut opt_map = Adam::new(adam(cfg.lr_g));
    let mut opt_syn = Adam::new(adam(cfg.lr_g));
    let mut opt_d = Adam::new(adam(cfg.lr_d));
    let ema_beta = 0.5f64.powf(cfg.batch_size as f64 / cfg.ema_half_life_images) as f32;
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.csv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "step,g_loss,d_loss,r1").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut last_r1 = 0.0;
    for step in 0..cfg.steps {
        // discriminator: softplus(D(fake)) + softplus(-D(real))
        let d_loss = {
            let mut g = Graph::new();
            let noise = noise_batch(&mut g, &gen.arch, cfg.batch_size, cfg, step, 1);
            let (fake, _) = generate(&mut g, &gen, false, z_batch(cfg, step, 1), noise);
            let reals = g.constant(real_batch(data, cfg, step));
            let pd = disc.params.bind(&mut g, true);
            let df = disc.forward(&mut g, &pd, fake);
            let dr = disc.forward(&mut g, &pd, reals);
            let lf = g.softplus(df);
            let ndr = g.scale(dr, -1.0);
            let lr = g.softplus(ndr);
            let lf = g.mean(lf);
            let lr = g.mean(lr);
            let loss = g.add(lf, lr);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(divergence(step, "non-finite discriminator loss", &log));
            }
            let mut grads = g.backward(loss);
            let gd = pd.grads(&g, &mut grads);
            opt_d.step(&mut disc.params, &gd);
            value
        };
        if step % cfg.r1_every == 0 {
            let reals = real_batch(data, cfg, step);
            let (mut grad, penalty) = disc.r1_weight_grad(&reals)?;
            if !penalty.is_finite() {
                return Err(divergence(step, "non-finite R1 penalty", &log));
            }
            let w = 0.5 * cfg.r1_gamma * cfg.r1_every as f32;
            for (_, t) in grad.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= w);
            }
            opt_d.step(&mut disc.params, &grad);
            last_r1 = penalty;
        }
        // generator: softplus(-D(G(z)))
        let g_loss = {
            let mut g = Graph::new();
            let noise = noise_batch(&mut g, &gen.arch, cfg.batch_size, cfg, step, 2);
            let (fake, bound) = generate(&mut g, &gen, true, z_batch(cfg, step, 2), noise);
            let pd = disc.params.bind(&mut g, false);
            let df = disc.forward(&mut g, &pd, fake);
            let ndf = g.scale(df, -1.0);
            let l = g.softplus(ndf);
            let loss = g.mean(l);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(divergence(step, "non-finite generator loss", &log));
            }
            let (pm, ps) = bound.expect("trainable generator");
            let mut grads = g.backward(loss);
            let gm = pm.grads(&g, &mut grads);
            let gs = ps.grads(&g, &mut grads);
            opt_map.step(&mut gen.mapping, &gm);
            opt_syn.step(&mut gen.synthesis, &gs);
            value
        };
        ema.mapping.lerp_toward(&gen.mapping, ema_beta);
        ema.synthesis.lerp_toward(&gen.synthesis, ema_beta);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let row = LogRow {
                step,
                g_loss,
                d_loss,
                r1: last_r1,
            };
            log::info!("step {step}: g {g_loss:.4} d {d_loss:.4} r1 {last_r1:.4}");
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{},{},{},{}", row.step, row.g_loss, row.d_loss, row.r1).map_err(|e| Error::io(&*path, e))?;
                f.flush().map_err(|e| Error::io(&*path, e))?;
            }
            log.push(row);
        }
        if (step + 1) % cfg.snapshot_every == 0 && step + 1 < cfg.steps {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("snapshot_{:06}.ckpt", step + 1));
                let mut snap = ema.clone();
                snap.info = serde_json::json!({ "steps": step + 1, "complete": false });
                snap.save(&path)?;
                snapshots.push(path);
            }
        }
    }
    finalize(&mut ema, cfg)?;
    Ok(PretrainOutput {
        generator: ema,
        discriminator: disc,
        log,
        snapshots,
    })
}

/// Caches `μ_w` and the automatic regularization radius, and tags the checkpoint as pretrained.
pub fn finalize(ckpt: &mut GeneratorCheckpoint, cfg: &PretrainConfig) -> Result<()> {
    ckpt.provenance = Provenance::Pretrained;
    ckpt.mean_latent = Some(mean_latent(MEAN_LATENT_SAMPLES, seed::derive(cfg.seed, 7), ckpt)?.values().to_vec());
    ckpt.alpha_auto = Some(auto_alpha(ckpt, ALPHA_AUTO_SAMPLES, seed::derive(cfg.seed, 8))?);
    ckpt.info = serde_json::json!({ "steps": cfg.steps, "config": cfg, "complete": true });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, res: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, 3, res, res], &mut seed::rng(seed)).map(|v| 0.5 + 0.2 * v)
    }

    #[test]
    fn constant_critic_has_zero_penalty() {
        let x = batch(2, 8, 0);
        let p = r1_penalty(|g, _| g.constant(Tensor::full(&[2, 1], 3.0)), &x).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn linear_critic_penalty_is_element_count() {
        let x = batch(3, 8, 1);
        let p = r1_penalty(|g, x| g.sum(x), &x).unwrap();
        assert_eq!(p, (3 * 8 * 8) as f64);
    }

    #[test]
    fn penalty_non_negative_for_random_nets() {
        let x = batch(2, 8, 2);
        for s in 0..100 {
            let d = Discriminator::init(8, s);
            assert!(d.r1_penalty(&x).unwrap() >= 0.0);
        }
    }

    #[test]
    fn r1_weight_gradient_matches_finite_differences() {
        let x = batch(2, 8, 3);
        let d = Discriminator::init(8, 4);
        let (grad, _) = d.r1_weight_grad(&x).unwrap();
        let name = "fc.weight";
        let h = 1e-2f32;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in (0..d.params.tensor(name).numel()).step_by(37) {
            let mut p = d.clone();
            p.params.get_mut(name).unwrap().data_mut()[i] += h;
            let mut m = d.clone();
            m.params.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (p.r1_penalty(&x).unwrap() - m.r1_penalty(&x).unwrap()) / (2.0 * h as f64);
            let a = grad.tensor(name).data()[i] as f64;
            num += (a - fd).powi(2);
            den += fd.powi(2);
        }
        let rel = (num / den).sqrt();
        assert!(rel < 5e-2, "relative error {rel}");
    }

    #[test]
    fn config_validation() {
        assert!(PretrainConfig::default().validate().is_ok());
        let bad = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
