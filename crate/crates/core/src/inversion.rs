//! Optimization-based projection of an image into W or W+.
//!
//! Minimizes `perceptual(x, G(w, n)) + λ_n · noise_reg(n)` over the code and
//! the noise maps with the generator frozen. Noise maps are renormalized after
//! every step. The best iterate (lowest total loss) is returned.

use pti_tensor::{Adam, AdamConfig, Graph, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gan::{code_vars, noise_vars, synthesis_forward, synthesize, GeneratorCheckpoint, LatentCode, LatentSpace, NoiseStack, Provenance};
use crate::image::ImageTensor;
use crate::perceptual::{noise_regularization_grad, renormalize_noise, PerceptualBackbone};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InversionInit {
    MeanLatent,
    Provided(LatentCode),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub space: LatentSpace,
    pub steps: usize,
    pub learning_rate: f32,
    pub lambda_n: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub init: InversionInit,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            space: LatentSpace::W,
            steps: 450,
            learning_rate: 5e-3,
            lambda_n: 1e5,
            beta1: 0.9,
            beta2: 0.999,
            init: InversionInit::MeanLatent,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn with_space(space: LatentSpace) -> Self {
        Self {
            space,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("inversion needs steps >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda_n >= 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be > 0 and lambda_n >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionStep {
    pub perceptual: f64,
    pub noise_reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub pivot: LatentCode,
    pub noise: NoiseStack,
    /// Loss of iterate `k` for `k < steps`.
    pub loss_trace: Vec<InversionStep>,
    /// Loss of the returned iterate.
    pub best: InversionStep,
    pub best_step: usize,
    pub final_image: ImageTensor,
}

/// Hash of pixel content; keys per-image random streams so results do not
/// depend on the position of an image within a batch.
pub fn content_key(image: &ImageTensor) -> u64 {
    let mut h = Sha256::new();
    h.update((image.resolution() as u64).to_le_bytes());
    for v in image.pixels() {
        h.update(v.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn initial_code(ckpt: &GeneratorCheckpoint, cfg: &InversionConfig) -> Result<LatentCode> {
    let base = match &cfg.init {
        InversionInit::MeanLatent => {
            LatentCode::w(ckpt.mean_latent.clone().ok_or(Error::MissingMeanLatent)?)?
        }
        InversionInit::Provided(c) => c.clone(),
    };
    if base.dim() != ckpt.latent_dim() {
        return Err(Error::ShapeMismatch("initial code has the wrong latent dim".into()));
    }
    match cfg.space {
        LatentSpace::W => base.collapse_to_w(),
        LatentSpace::WPlus => base.to_wplus(ckpt.num_layers()),
    }
}

/// Loss and gradients at one iterate.
struct Eval {
    step: InversionStep,
    grad_code: Vec<Tensor>,
    grad_noise: Vec<Tensor>,
}

fn evaluate(
    ckpt: &GeneratorCheckpoint,
    backbone: &PerceptualBackbone,
    target_feats: &[Tensor],
    code: &LatentCode,
    noise: &NoiseStack,
    lambda_n: f64,
) -> Eval {
    let mut g = Graph::new();
    let p = ckpt.synthesis.bind(&mut g, false);
    let layers = ckpt.num_layers();
    let ws = code_vars(&mut g, &[code], layers, true);
    let ns = noise_vars(&mut g, &[noise], true);
    let img = synthesis_forward(&mut g, &ckpt.arch, &p, &ws, &ns);
    let loss = backbone.distance_graph(&mut g, img, target_feats);
    let perceptual = g.scalar(loss);
    let mut grads = g.backward(loss);
    let code_leaves: Vec<_> = match code.space() {
        LatentSpace::W => vec![ws[0]],
        LatentSpace::WPlus => ws.clone(),
    };
    let grad_code = code_leaves
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    let (reg, reg_grads) = noise_regularization_grad(noise);
    let grad_noise = ns
        .iter()
        .zip(reg_grads)
        .map(|(&v, rg)| {
            let mut t = grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            t.axpy(lambda_n as f32, &rg);
            t
        })
        .collect();
    Eval {
        step: InversionStep {
            perceptual,
            noise_reg: reg,
            total: perceptual + lambda_n * reg,
        },
        grad_code,
        grad_noise,
    }
}

fn divergence(step: usize, what: &str, trace: &[InversionStep]) -> Error {
    Error::Divergence {
        step,
        what: what.into(),
        trace: trace.iter().map(|s| s.total).collect(),
    }
}

pub fn invert(
    image: &ImageTensor,
    ckpt: &GeneratorCheckpoint,
    backbone: &PerceptualBackbone,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    ckpt.expect_provenance(Provenance::Pretrained)?;
    if image.resolution() != ckpt.resolution() {
        return Err(Error::ShapeMismatch(format!(
            "image is {}px, generator is {}px",
            image.resolution(),
            ckpt.resolution()
        )));
    }
    let key = seed::derive(cfg.seed, content_key(image));
    let target_feats = backbone.features(image);
    let mut code = initial_code(ckpt, cfg)?;
    let mut noise = renormalize_noise(&NoiseStack::sample(seed::derive(key, 1), &ckpt.arch), key);
    let d = ckpt.latent_dim();
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate).with_betas(cfg.beta1, cfg.beta2));
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut best: Option<(InversionStep, usize, LatentCode, NoiseStack)> = None;
    for step in 0..=cfg.steps {
        let e = evaluate(ckpt, backbone, &target_feats, &code, &noise, cfg.lambda_n);
        if !e.step.total.is_finite() {
            return Err(divergence(step, "non-finite inversion loss", &trace));
        }
        if best.as_ref().is_none_or(|b| e.step.total < b.0.total) {
            best = Some((e.step, step, code.clone(), noise.clone()));
        }
        if step == cfg.steps {
            break;
        }
        trace.push(e.step);
        // code update
        let rows = e.grad_code.len();
        let mut values = code.to_tensor();
        for (r, gr) in e.grad_code.iter().enumerate() {
            let mut row = Tensor::new(&[d], values.data()[r * d..(r + 1) * d].to_vec());
            opt.step_tensor(&format!("code{r}"), &mut row, &gr.clone().reshape(&[d]));
            values.data_mut()[r * d..(r + 1) * d].copy_from_slice(row.data());
        }
        code = match code.space() {
            LatentSpace::W => LatentCode::w(values.into_data()),
            LatentSpace::WPlus => LatentCode::wplus(rows, d, values.into_data()),
        }
        .map_err(|_| divergence(step, "non-finite latent code", &trace))?;
        // noise update, then renormalization
        let mut maps = noise.maps().to_vec();
        for (l, (m, gn)) in maps.iter_mut().zip(&e.grad_noise).enumerate() {
            opt.step_tensor(&format!("noise{l}"), m, gn);
        }
        noise = renormalize_noise(&NoiseStack::new(maps), seed::derive(key, 2 + step as u64));
    }
    let (best_loss, best_step, pivot, noise) = best.expect("at least one iterate");
    let final_image = synthesize(&pivot, &noise, 1.0, ckpt)?;
    Ok(InversionResult {
        pivot,
        noise,
        loss_trace: trace,
        best: best_loss,
        best_step,
        final_image,
    })
}

/// Independent inversions; a failure of one item does not stop the others.
pub fn invert_batch(
    images: &[ImageTensor],
    ckpt: &GeneratorCheckpoint,
    backbone: &PerceptualBackbone,
    cfg: &InversionConfig,
) -> Vec<Result<InversionResult>> {
    images.iter().map(|im| invert(im, ckpt, backbone, cfg)).collect()
}
