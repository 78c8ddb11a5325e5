//! Pivotal tuning: fine-tunes synthesis weights so fixed pivot codes reproduce
//! their targets, with an optional locality regularizer that keeps images of
//! nearby codes close to what the original weights produce.

use pti_tensor::{Adam, AdamConfig, Bound, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{
    code_vars, map_latent, noise_vars, sample_noise, sample_z, synthesis_forward, synthesize, GeneratorCheckpoint,
    LatentCode, LatentSpace, NoiseStack, Provenance,
};
use crate::image::ImageTensor;
use crate::inversion::{content_key, invert, InversionConfig, InversionResult};
use crate::metrics;
use crate::perceptual::{renormalize_noise, PerceptualBackbone};
use crate::seed;

/// Resamples allowed when a regularization code lands on its pivot.
pub const MAX_DEGENERATE_RETRIES: usize = 8;
const DEGENERATE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PivotSource {
    InvertedW,
    InvertedWPlus,
    MeanLatent,
    Random,
}

/// Regularization radius: the checkpoint's stored default or an absolute value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Alpha {
    Auto,
    Absolute(f64),
}

impl Alpha {
    pub fn resolve(self, ckpt: &GeneratorCheckpoint) -> Result<f64> {
        match self {
            Alpha::Absolute(a) => Ok(a),
            Alpha::Auto => ckpt
                .alpha_auto
                .ok_or_else(|| Error::InvalidParameter("alpha=auto needs alpha_auto in the checkpoint".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    pub steps: usize,
    pub learning_rate: f32,
    pub lambda_l2: f64,
    pub lambda_lpips: f64,
    pub regularization_enabled: bool,
    pub alpha: Alpha,
    pub lambda_r: f64,
    pub lambda_r_l2: f64,
    pub n_r: usize,
    pub optimize_pivot: bool,
    pub pivot_source: PivotSource,
    pub seed: u64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            steps: 350,
            learning_rate: 3e-4,
            lambda_l2: 1.0,
            lambda_lpips: 1.0,
            regularization_enabled: true,
            alpha: Alpha::Auto,
            lambda_r: 0.1,
            lambda_r_l2: 1.0,
            n_r: 1,
            optimize_pivot: false,
            pivot_source: PivotSource::InvertedW,
            seed: 0,
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("tuning needs steps >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be > 0".into()));
        }
        for (name, v) in [
            ("lambda_l2", self.lambda_l2),
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_r", self.lambda_r),
            ("lambda_r_l2", self.lambda_r_l2),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.regularization_enabled {
            if let Alpha::Absolute(a) = self.alpha {
                if !(a > 0.0) {
                    return Err(Error::InvalidParameter(format!("alpha must be > 0, got {a}")));
                }
            }
            if self.n_r == 0 {
                return Err(Error::InvalidParameter("n_r must be >= 1".into()));
            }
        }
        Ok(())
    }

    fn regularizes(&self) -> bool {
        self.regularization_enabled && self.lambda_r > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PivotTarget {
    pub pivot: LatentCode,
    pub noise: NoiseStack,
    pub target: ImageTensor,
}

impl From<(&InversionResult, &ImageTensor)> for PivotTarget {
    fn from((inv, target): (&InversionResult, &ImageTensor)) -> Self {
        Self {
            pivot: inv.pivot.clone(),
            noise: inv.noise.clone(),
            target: target.clone(),
        }
    }
}

/// Pivots with their noise and targets. Pivots are normally W codes; W+
/// pivots are accepted for the W+ ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct PivotSet {
    items: Vec<PivotTarget>,
}

impl PivotSet {
    pub fn new(items: Vec<PivotTarget>, ckpt: &GeneratorCheckpoint) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidParameter("pivot set is empty".into()));
        }
        for (i, it) in items.iter().enumerate() {
            if it.pivot.dim() != ckpt.latent_dim() {
                return Err(Error::ShapeMismatch(format!("pivot {i} has dim {}", it.pivot.dim())));
            }
            if it.pivot.space() == LatentSpace::WPlus && it.pivot.rows() != ckpt.num_layers() {
                return Err(Error::ShapeMismatch(format!("pivot {i} has {} rows", it.pivot.rows())));
            }
            if it.target.resolution() != ckpt.resolution() {
                return Err(Error::ShapeMismatch(format!(
                    "target {i} is {}px, generator is {}px",
                    it.target.resolution(),
                    ckpt.resolution()
                )));
            }
            it.noise.validate(&ckpt.arch)?;
        }
        Ok(Self { items })
    }

    pub fn single(item: PivotTarget, ckpt: &GeneratorCheckpoint) -> Result<Self> {
        Self::new(vec![item], ckpt)
    }

    pub fn items(&self) -> &[PivotTarget] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningStep {
    /// Weighted reconstruction term per target.
    pub recon: Vec<f64>,
    /// Locality term before weighting by `lambda_r`; `None` when disabled.
    pub reg: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningResult {
    pub checkpoint: GeneratorCheckpoint,
    /// Objective at iterate `k` for `k < steps`, evaluated before the update.
    pub loss_trace: Vec<TuningStep>,
    /// Pivots after tuning; differ from the inputs only with `optimize_pivot`.
    pub pivots: Vec<LatentCode>,
    /// Weighted reconstruction term per target at the returned weights.
    pub final_recon: Vec<f64>,
    pub final_images: Vec<ImageTensor>,
}

/// `w_p + α·(w_z − w_p)/‖w_z − w_p‖`, so the result sits at distance α from `w_p`.
pub fn interpolate_latent(w_p: &LatentCode, w_z: &LatentCode, alpha: f64) -> Result<LatentCode> {
    if w_p.space() != LatentSpace::W || w_z.space() != LatentSpace::W {
        return Err(Error::InvalidParameter("interpolate_latent takes W codes".into()));
    }
    if w_p.dim() != w_z.dim() {
        return Err(Error::ShapeMismatch("latent dims differ".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
    }
    LatentCode::w(step_toward(w_p.values(), w_z.values(), alpha)?)
}

fn step_toward(p: &[f32], z: &[f32], alpha: f64) -> Result<Vec<f32>> {
    let diff: Vec<f64> = z.iter().zip(p).map(|(&a, &b)| a as f64 - b as f64).collect();
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm <= DEGENERATE_TOL {
        return Err(Error::DegenerateDirection(norm));
    }
    let k = alpha / norm;
    Ok(p.iter().zip(&diff).map(|(&b, d)| (b as f64 + k * d) as f32).collect())
}

/// Row-wise interpolation; for W+ pivots every row moves by α toward `w_z`.
fn interpolate_any(w_p: &LatentCode, w_z: &LatentCode, alpha: f64) -> Result<LatentCode> {
    match w_p.space() {
        LatentSpace::W => interpolate_latent(w_p, w_z, alpha),
        LatentSpace::WPlus => {
            let mut values = Vec::with_capacity(w_p.values().len());
            for r in 0..w_p.rows() {
                values.extend(step_toward(w_p.row(r), w_z.values(), alpha)?);
            }
            LatentCode::wplus(w_p.rows(), w_p.dim(), values)
        }
    }
}

/// A regularization probe: code at radius α from a pivot, fresh noise, and the
/// original generator's image there.
struct RegProbe {
    code: LatentCode,
    noise: NoiseStack,
    feats: Vec<Tensor>,
    image: Tensor,
}

fn reg_probe(
    original: &GeneratorCheckpoint,
    backbone: &PerceptualBackbone,
    pivot: &LatentCode,
    alpha: f64,
    stream: u64,
) -> Result<RegProbe> {
    let mut last = 0.0;
    for attempt in 0..=MAX_DEGENERATE_RETRIES {
        let z = sample_z(stream, attempt as u64, original.latent_dim());
        let w_z = map_latent(&z, original)?;
        match interpolate_any(pivot, &w_z, alpha) {
            Ok(code) => {
                let noise = sample_noise(seed::derive(stream, 1 << 32), original);
                let x_r = synthesize(&code, &noise, 1.0, original)?;
                return Ok(RegProbe {
                    code,
                    noise,
                    feats: backbone.features(&x_r),
                    image: x_r.to_tensor(),
                });
            }
            Err(Error::DegenerateDirection(n)) => last = n,
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateDirection(last))
}

/// Frozen per-run data: target features, the original generator and α.
pub struct TuningObjective<'a> {
    original: &'a GeneratorCheckpoint,
    backbone: &'a PerceptualBackbone,
    cfg: &'a TuningConfig,
    targets: Vec<(Tensor, Vec<Tensor>)>,
    noise: Vec<NoiseStack>,
    alpha: f64,
}

struct Built {
    g: Graph,
    loss: Var,
    step: TuningStep,
    params: Bound,
    code_leaves: Vec<Vec<Var>>,
    images: Vec<Var>,
}

impl<'a> TuningObjective<'a> {
    pub fn new(
        original: &'a GeneratorCheckpoint,
        pivots: &PivotSet,
        backbone: &'a PerceptualBackbone,
        cfg: &'a TuningConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let alpha = if cfg.regularizes() { cfg.alpha.resolve(original)? } else { 0.0 };
        if cfg.regularizes() && !(alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(Self {
            original,
            backbone,
            cfg,
            targets: pivots
                .items()
                .iter()
                .map(|it| (it.target.to_tensor(), backbone.features(&it.target)))
                .collect(),
            noise: pivots.items().iter().map(|it| it.noise.clone()).collect(),
            alpha,
        })
    }

    fn build(&self, synthesis: &ParamStore, pivots: &[LatentCode], step: usize, grads: bool) -> Result<Built> {
        let cfg = self.cfg;
        let arch = &self.original.arch;
        let layers = self.original.num_layers();
        let mut g = Graph::new();
        let params = synthesis.bind(&mut g, grads);
        let mut recon_vars = Vec::with_capacity(pivots.len());
        let mut code_leaves = Vec::with_capacity(pivots.len());
        let mut images = Vec::with_capacity(pivots.len());
        for (i, pivot) in pivots.iter().enumerate() {
            let ws = code_vars(&mut g, &[pivot], layers, grads && cfg.optimize_pivot);
            let ns = noise_vars(&mut g, &[&self.noise[i]], false);
            let img = synthesis_forward(&mut g, arch, &params, &ws, &ns);
            let (target, feats) = &self.targets[i];
            let perc = self.backbone.distance_graph(&mut g, img, feats);
            let t = g.constant(target.clone());
            let l2 = g.mse(img, t);
            let a = g.scale(perc, cfg.lambda_lpips as f32);
            let b = g.scale(l2, cfg.lambda_l2 as f32);
            recon_vars.push(g.add(a, b));
            let mut leaves = ws.clone();
            leaves.dedup();
            code_leaves.push(leaves);
            images.push(img);
        }
        let recon_vals: Vec<f64> = recon_vars.iter().map(|&v| g.scalar(v)).collect();
        let mut loss = g.mean_of(&recon_vars);
        let mut reg = None;
        if cfg.regularizes() {
            let mut terms = Vec::with_capacity(cfg.n_r);
            for r in 0..cfg.n_r {
                let k = (step * cfg.n_r + r) as u64;
                let stream = seed::derive_tagged(cfg.seed, "tune-reg", k);
                let pivot = &pivots[k as usize % pivots.len()];
                let probe = reg_probe(self.original, self.backbone, pivot, self.alpha, stream)?;
                let ws = code_vars(&mut g, &[&probe.code], layers, false);
                let ns = noise_vars(&mut g, &[&probe.noise], false);
                let img = synthesis_forward(&mut g, arch, &params, &ws, &ns);
                let perc = self.backbone.distance_graph(&mut g, img, &probe.feats);
                let t = g.constant(probe.image);
                let l2 = g.mse(img, t);
                let b = g.scale(l2, cfg.lambda_r_l2 as f32);
                terms.push(g.add(perc, b));
            }
            let lr = g.mean_of(&terms);
            reg = Some(g.scalar(lr));
            let weighted = g.scale(lr, cfg.lambda_r as f32);
            loss = g.add(loss, weighted);
        }
        let step = TuningStep {
            recon: recon_vals,
            reg,
            total: g.scalar(loss),
        };
        Ok(Built {
            g,
            loss,
            step,
            params,
            code_leaves,
            images,
        })
    }

    /// Objective value at `step` for the given synthesis weights and pivots.
    pub fn value(&self, synthesis: &ParamStore, pivots: &[LatentCode], step: usize) -> Result<TuningStep> {
        Ok(self.build(synthesis, pivots, step, false)?.step)
    }

    /// Objective value and its gradient with respect to the synthesis weights.
    pub fn gradients(
        &self,
        synthesis: &ParamStore,
        pivots: &[LatentCode],
        step: usize,
    ) -> Result<(TuningStep, ParamStore)> {
        let b = self.build(synthesis, pivots, step, true)?;
        let mut grads = b.g.backward(b.loss);
        let pg = b.params.grads(&b.g, &mut grads);
        Ok((b.step, pg))
    }
}

fn divergence(step: usize, what: &str, trace: &[TuningStep]) -> Error {
    Error::Divergence {
        step,
        what: what.into(),
        trace: trace.iter().map(|s| s.total).collect(),
    }
}

fn update_pivot(opt: &mut Adam, name: &str, pivot: &LatentCode, grads: &[Tensor]) -> Result<LatentCode> {
    let d = pivot.dim();
    let mut values = pivot.values().to_vec();
    for (r, gr) in grads.iter().enumerate() {
        let mut row = Tensor::new(&[d], values[r * d..(r + 1) * d].to_vec());
        opt.step_tensor(&format!("{name}.{r}"), &mut row, &gr.clone().reshape(&[d]));
        values[r * d..(r + 1) * d].copy_from_slice(row.data());
    }
    match pivot.space() {
        LatentSpace::W => LatentCode::w(values),
        LatentSpace::WPlus => LatentCode::wplus(pivot.rows(), d, values),
    }
}

/// Tunes the synthesis weights of a pretrained generator around `pivots`.
pub fn pivotal_tune(
    checkpoint: &GeneratorCheckpoint,
    pivots: &PivotSet,
    backbone: &PerceptualBackbone,
    cfg: &TuningConfig,
) -> Result<TuningResult> {
    checkpoint.expect_provenance(Provenance::Pretrained)?;
    let objective = TuningObjective::new(checkpoint, pivots, backbone, cfg)?;
    let mut synthesis = checkpoint.synthesis.clone();
    let mut codes: Vec<LatentCode> = pivots.items().iter().map(|it| it.pivot.clone()).collect();
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate));
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = objective.build(&synthesis, &codes, step, true)?;
        if !b.step.total.is_finite() {
            return Err(divergence(step, "non-finite tuning loss", &trace));
        }
        let mut grads = b.g.backward(b.loss);
        let pg = b.params.grads(&b.g, &mut grads);
        if cfg.optimize_pivot {
            for (i, leaves) in b.code_leaves.iter().enumerate() {
                let gs: Vec<Tensor> = leaves
                    .iter()
                    .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(b.g.shape(v))))
                    .collect();
                codes[i] = update_pivot(&mut opt, &format!("pivot{i}"), &codes[i], &gs)
                    .map_err(|_| divergence(step, "non-finite pivot", &trace))?;
            }
        }
        opt.step(&mut synthesis, &pg);
        trace.push(b.step);
        if !synthesis.is_finite() {
            return Err(divergence(step, "non-finite generator weights", &trace));
        }
    }
    let mut tuned = checkpoint.clone();
    tuned.synthesis = synthesis;
    tuned.provenance = Provenance::Tuned;
    tuned.info = serde_json::json!({
        "parent_seed": checkpoint.rng_seed,
        "tuning": cfg,
        "pivots": pivots.len(),
    });
    let fin = objective.build(&tuned.synthesis, &codes, cfg.steps, false)?;
    let final_images = fin
        .images
        .iter()
        .map(|&v| ImageTensor::from_tensor(fin.g.value(v), 0))
        .collect::<Result<_>>()?;
    Ok(TuningResult {
        checkpoint: tuned,
        loss_trace: trace,
        pivots: codes,
        final_recon: fin.step.recon,
        final_images,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub perceptual: f64,
    pub mse: f64,
}

/// Mean image change between two generators over `num_probes` random codes
/// rendered with shared noise.
pub fn locality_drift(
    original: &GeneratorCheckpoint,
    tuned: &GeneratorCheckpoint,
    backbone: &PerceptualBackbone,
    num_probes: usize,
    seed: u64,
) -> Result<Drift> {
    if !original.same_architecture(tuned) {
        return Err(Error::ShapeMismatch("drift needs generators of the same architecture".into()));
    }
    if num_probes == 0 {
        return Err(Error::InvalidParameter("num_probes must be >= 1".into()));
    }
    let stream = seed::derive_tagged(seed, "drift", 0);
    let (mut perc, mut l2) = (0.0, 0.0);
    for i in 0..num_probes {
        let w = map_latent(&sample_z(stream, i as u64, original.latent_dim()), original)?;
        let noise = sample_noise(seed::derive(stream, (1 << 32) + i as u64), original);
        let a = synthesize(&w, &noise, 1.0, original)?;
        let b = synthesize(&w, &noise, 1.0, tuned)?;
        perc += backbone.distance(&a, &b)?;
        l2 += metrics::mse(&a, &b)?;
    }
    let n = num_probes as f64;
    Ok(Drift {
        perceptual: perc / n,
        mse: l2 / n,
    })
}

/// The Fig.-14-style ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    /// W inversion then tuning.
    A,
    /// W+ inversion then tuning.
    B,
    /// Mean-latent pivot.
    C,
    /// Random pivot.
    D,
    /// Mean-latent pivot optimized jointly with the weights.
    E,
    /// Random pivot optimized jointly with the weights.
    F,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F];

    pub fn pivot_source(self) -> PivotSource {
        match self {
            Self::A => PivotSource::InvertedW,
            Self::B => PivotSource::InvertedWPlus,
            Self::C | Self::E => PivotSource::MeanLatent,
            Self::D | Self::F => PivotSource::Random,
        }
    }

    pub fn optimize_pivot(self) -> bool {
        matches!(self, Self::E | Self::F)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
            Self::E => "E",
            Self::F => "F",
        }
    }
}

/// Builds the starting pivot for `source`. Inverted sources run `invert`;
/// the others draw noise keyed by the image content.
pub fn make_pivot(
    checkpoint: &GeneratorCheckpoint,
    image: &ImageTensor,
    backbone: &PerceptualBackbone,
    source: PivotSource,
    inversion: &InversionConfig,
    seed: u64,
) -> Result<PivotTarget> {
    let inverted = |space| -> Result<PivotTarget> {
        let cfg = InversionConfig {
            space,
            ..inversion.clone()
        };
        let inv = invert(image, checkpoint, backbone, &cfg)?;
        Ok(PivotTarget::from((&inv, image)))
    };
    let key = seed::derive(seed, content_key(image));
    let noise = || renormalize_noise(&sample_noise(seed::derive(key, 1), checkpoint), key);
    match source {
        PivotSource::InvertedW => inverted(LatentSpace::W),
        PivotSource::InvertedWPlus => inverted(LatentSpace::WPlus),
        PivotSource::MeanLatent => Ok(PivotTarget {
            pivot: LatentCode::w(checkpoint.mean_latent.clone().ok_or(Error::MissingMeanLatent)?)?,
            noise: noise(),
            target: image.clone(),
        }),
        PivotSource::Random => Ok(PivotTarget {
            pivot: map_latent(&sample_z(key, 0, checkpoint.latent_dim()), checkpoint)?,
            noise: noise(),
            target: image.clone(),
        }),
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutput {
    pub variant: AblationVariant,
    pub initial: PivotTarget,
    pub tuning: TuningResult,
}

/// Runs one ablation variant. Every variant uses the same number of tuning
/// steps, `tuning.steps`.
pub fn ablation_variant(
    checkpoint: &GeneratorCheckpoint,
    image: &ImageTensor,
    backbone: &PerceptualBackbone,
    variant: AblationVariant,
    inversion: &InversionConfig,
    tuning: &TuningConfig,
) -> Result<AblationOutput> {
    let cfg = TuningConfig {
        pivot_source: variant.pivot_source(),
        optimize_pivot: variant.optimize_pivot(),
        ..tuning.clone()
    };
    let initial = make_pivot(checkpoint, image, backbone, cfg.pivot_source, inversion, cfg.seed)?;
    let set = PivotSet::single(initial.clone(), checkpoint)?;
    let mut result = pivotal_tune(checkpoint, &set, backbone, &cfg)?;
    if variant != AblationVariant::A {
        result.checkpoint.provenance = Provenance::AblationVariant;
    }
    result.checkpoint.info["ablation_variant"] = variant.name().into();
    Ok(AblationOutput {
        variant,
        initial,
        tuning: result,
    })
}

/// How far a jointly optimized pivot moved, measured under the original
/// generator with the pivot's own noise.
pub fn pivot_drift_probe(
    checkpoint: &GeneratorCheckpoint,
    image: &ImageTensor,
    backbone: &PerceptualBackbone,
    inversion: &InversionConfig,
    tuning: &TuningConfig,
) -> Result<Drift> {
    let start = make_pivot(checkpoint, image, backbone, tuning.pivot_source, inversion, tuning.seed)?;
    let set = PivotSet::single(start.clone(), checkpoint)?;
    let result = pivotal_tune(checkpoint, &set, backbone, tuning)?;
    let before = synthesize(&start.pivot, &start.noise, 1.0, checkpoint)?;
    let after = synthesize(&result.pivots[0], &start.noise, 1.0, checkpoint)?;
    Ok(Drift {
        perceptual: backbone.distance(&before, &after)?,
        mse: metrics::mse(&before, &after)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interpolation_follows_the_unit_direction() {
        let p = LatentCode::w(vec![0.0; 4]).unwrap();
        let z = LatentCode::w(vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let r = interpolate_latent(&p, &z, 2.0).unwrap();
        assert_eq!(r.values(), &[1.2, 1.6, 0.0, 0.0]);
    }

    #[test]
    fn coincident_codes_are_degenerate() {
        let p = LatentCode::w(vec![0.5, -1.0]).unwrap();
        assert!(matches!(interpolate_latent(&p, &p, 1.0), Err(Error::DegenerateDirection(_))));
    }

    #[test]
    fn wplus_rows_each_move_by_alpha() {
        let p = LatentCode::wplus(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let z = LatentCode::w(vec![0.0, 5.0]).unwrap();
        let r = interpolate_any(&p, &z, 0.5).unwrap();
        for i in 0..2 {
            let d: f64 = r
                .row(i)
                .iter()
                .zip(p.row(i))
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((d - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TuningConfig::default().validate().is_ok());
        let bad = TuningConfig {
            steps: 0,
            ..TuningConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TuningConfig {
            alpha: Alpha::Absolute(0.0),
            ..TuningConfig::default()
        };
        assert!(bad.validate().is_err());
        let off = TuningConfig {
            alpha: Alpha::Absolute(0.0),
            regularization_enabled: false,
            ..TuningConfig::default()
        };
        assert!(off.validate().is_ok());
    }

    proptest! {
        #[test]
        fn interpolant_sits_at_radius_alpha(
            p in proptest::collection::vec(-3.0f32..3.0, 16),
            z in proptest::collection::vec(-3.0f32..3.0, 16),
            alpha in 0.05f64..50.0,
        ) {
            let wp = LatentCode::w(p).unwrap();
            let wz = LatentCode::w(z).unwrap();
            prop_assume!(wp.distance(&wz).unwrap() > 1e-3);
            let r = interpolate_latent(&wp, &wz, alpha).unwrap();
            let d = r.distance(&wp).unwrap();
            prop_assert!((d - alpha).abs() <= 1e-6 * alpha.max(1.0), "{} vs {}", d, alpha);
        }
    }
}
