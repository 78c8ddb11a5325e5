//! Trained measurement oracles: a factor regressor (pose, smile, age) and an
//! identity embedder. Both are small conv nets over the same trunk layout.

use std::path::Path;

use pti_tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::render::{ContinuousFactors, IdentityAttributes};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{self, TrunkSpec};
use crate::seed;

/// Held-out mean absolute pose error the regressor is expected to reach, degrees.
pub const POSE_MAE_TARGET: f64 = 1.5;
/// Held-out same/cross identity ROC-AUC the embedder is expected to reach.
pub const ID_AUC_TARGET: f64 = 0.95;

const POSE_SCALE: f64 = 30.0;
const REGRESSOR_OUTPUTS: usize = 3 + 7;
const EMBED_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Std of Gaussian pixel noise added to training inputs.
    pub input_noise: f32,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 2e-3,
            input_noise: 0.02,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

fn regression_targets(s: &Sample) -> [f32; REGRESSOR_OUTPUTS] {
    let f = &s.factors;
    let id = IdentityAttributes::from_id(f.identity_id);
    let tau = std::f64::consts::TAU;
    [
        (f.pose / POSE_SCALE) as f32,
        f.smile as f32,
        (2.0 * f.age - 1.0) as f32,
        // auxiliary identity targets enrich the trunk used as perceptual backbone
        ((id.aspect - 1.0) / 0.15) as f32,
        ((id.eye_spacing - 0.4) / 0.1) as f32,
        (tau * id.base_hue).cos() as f32,
        (tau * id.base_hue).sin() as f32,
        (tau * id.hair_hue).cos() as f32,
        (tau * id.hair_hue).sin() as f32,
        ((id.hair_value - 0.35) / 0.2) as f32,
    ]
}

/// Deterministic train/holdout split by hashed index.
fn split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::item_rng(seed, "oracle-split", 0));
    let hold = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let holdout = idx[..hold].to_vec();
    let train = idx[hold..].to_vec();
    (train, holdout)
}

fn batch_images(samples: &[Sample], idx: &[usize], noise: f32, rng: &mut impl Rng) -> Tensor {
    let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &samples[i].image).collect();
    let mut t = ImageTensor::batch(&imgs);
    if noise > 0.0 {
        let n = Tensor::randn(t.shape(), rng);
        t.axpy(noise, &n);
    }
    t
}

/// Minibatch Adam loop with linear learning-rate decay to 10%.
fn train_loop(
    params: &mut ParamStore,
    train: &[usize],
    cfg: &OracleTrainConfig,
    tag: &str,
    mut loss_fn: impl FnMut(&mut Graph, &pti_tensor::Bound, &[usize], &mut rand_chacha::ChaCha8Rng) -> Var,
) -> Result<()> {
    let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate));
    let mut rng = seed::item_rng(cfg.seed, tag, 0);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch).max(1);
    let mut step = 0;
    let mut order = train.to_vec();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let frac = step as f32 / total as f32;
            adam.config.lr = cfg.learning_rate * (1.0 - 0.9 * frac);
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let loss = loss_fn(&mut g, &p, chunk, &mut rng);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::TrainingDivergence(format!(
                    "{tag}: non-finite loss at epoch {epoch}"
                )));
            }
            let mut grads = g.backward(loss);
            let gp = p.grads(&g, &mut grads);
            adam.step(params, &gp);
            step += 1;
        }
        log::debug!("{tag}: epoch {epoch} done");
    }
    Ok(())
}

/// Predicts `(pose, smile, age)` from an image.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorRegressor {
    pub trunk: TrunkSpec,
    pub params: ParamStore,
    pub heldout_pose_mae: f64,
}

impl FactorRegressor {
    /// Randomly initialized weights, for tests and tooling that need the
    /// architecture without a trained model.
    pub fn untrained(resolution: usize, seed: u64) -> Self {
        Self::init(resolution, seed)
    }

    fn init(resolution: usize, seed: u64) -> Self {
        let trunk = TrunkSpec::new(resolution);
        let mut rng = seed::item_rng(seed, "regressor-init", 0);
        let mut params = ParamStore::new();
        trunk.init(&mut params, "trunk", &mut rng);
        nn::init_linear(&mut params, "head.fc0", trunk.feature_len(), 64, 1.0, 0.0, &mut rng);
        nn::init_linear(&mut params, "head.fc1", 64, REGRESSOR_OUTPUTS, 1.0, 0.0, &mut rng);
        Self {
            trunk,
            params,
            heldout_pose_mae: f64::NAN,
        }
    }

    fn forward(&self, g: &mut Graph, p: &pti_tensor::Bound, images: Var) -> Var {
        let (_, flat) = self.trunk.forward(g, p, "trunk", images);
        let h = nn::linear(g, p, "head.fc0", flat, 1.0);
        let h = nn::lrelu(g, h);
        nn::linear(g, p, "head.fc1", h, 1.0)
    }

    pub fn fit(samples: &[Sample], cfg: &OracleTrainConfig) -> Result<Self> {
        if samples.len() < 1000 {
            return Err(Error::InvalidParameter(format!(
                "factor regressor needs >= 1000 samples, got {}",
                samples.len()
            )));
        }
        let resolution = samples[0].image.resolution();
        let mut model = Self::init(resolution, cfg.seed);
        let (train, holdout) = split(samples.len(), cfg.holdout_fraction, cfg.seed);
        let targets: Vec<[f32; REGRESSOR_OUTPUTS]> = samples.iter().map(regression_targets).collect();
        let arch = model.clone();
        train_loop(&mut model.params, &train, cfg, "regressor", |g, p, chunk, rng| {
            let x = g.constant(batch_images(samples, chunk, cfg.input_noise, rng));
            let y = arch.forward(g, p, x);
            let t: Vec<f32> = chunk.iter().flat_map(|&i| targets[i]).collect();
            let t = g.constant(Tensor::new(&[chunk.len(), REGRESSOR_OUTPUTS], t));
            g.mse(y, t)
        })?;
        let mae = holdout
            .iter()
            .map(|&i| (model.predict(&samples[i].image).pose - samples[i].factors.pose).abs())
            .sum::<f64>()
            / holdout.len() as f64;
        model.heldout_pose_mae = mae;
        if mae > 3.0 * POSE_MAE_TARGET {
            return Err(Error::TrainingDivergence(format!(
                "held-out pose MAE {mae:.3} exceeds 3x the {POSE_MAE_TARGET} degree target"
            )));
        }
        Ok(model)
    }

    pub fn predict_batch(&self, images: &[&ImageTensor]) -> Vec<ContinuousFactors> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(ImageTensor::batch(images));
        let y = self.forward(&mut g, &p, x);
        g.value(y)
            .data()
            .chunks(REGRESSOR_OUTPUTS)
            .map(|r| ContinuousFactors {
                pose: r[0] as f64 * POSE_SCALE,
                smile: r[1] as f64,
                age: (r[2] as f64 + 1.0) / 2.0,
            })
            .collect()
    }

    pub fn predict(&self, image: &ImageTensor) -> ContinuousFactors {
        self.predict_batch(&[image])[0]
    }

    pub fn resolution(&self) -> usize {
        self.trunk.resolution
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "factor-regressor",
            "oracle",
            serde_json::json!({
                "trunk": self.trunk,
                "heldout_pose_mae": self.heldout_pose_mae,
            }),
            ParamStore::new(),
        );
        c.put_group("params", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("factor-regressor")?;
        let trunk: TrunkSpec = serde_json::from_value(c.metadata["trunk"].clone())?;
        Ok(Self {
            trunk,
            params: c.group("params"),
            heldout_pose_mae: c.metadata["heldout_pose_mae"].as_f64().unwrap_or(f64::NAN),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub fn fit_factor_regressor(samples: &[Sample], cfg: &OracleTrainConfig) -> Result<FactorRegressor> {
    FactorRegressor::fit(samples, cfg)
}

pub fn predict_factors(reg: &FactorRegressor, image: &ImageTensor) -> ContinuousFactors {
    reg.predict(image)
}

/// Identity classifier whose penultimate features define identity similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedder {
    pub trunk: TrunkSpec,
    pub params: ParamStore,
    pub num_classes: usize,
    pub heldout_auc: f64,
}

impl IdentityEmbedder {
    /// Randomly initialized weights with `num_classes` identity logits.
    pub fn untrained(resolution: usize, num_classes: usize, seed: u64) -> Self {
        Self::init(resolution, num_classes, seed)
    }

    fn init(resolution: usize, num_classes: usize, seed: u64) -> Self {
        let trunk = TrunkSpec::new(resolution);
        let mut rng = seed::item_rng(seed, "embedder-init", 0);
        let mut params = ParamStore::new();
        trunk.init(&mut params, "trunk", &mut rng);
        nn::init_linear(&mut params, "embed", trunk.feature_len(), EMBED_DIM, 1.0, 0.0, &mut rng);
        nn::init_linear(&mut params, "classify", EMBED_DIM, num_classes, 1.0, 0.0, &mut rng);
        Self {
            trunk,
            params,
            num_classes,
            heldout_auc: f64::NAN,
        }
    }

    fn features(&self, g: &mut Graph, p: &pti_tensor::Bound, images: Var) -> Var {
        let (_, flat) = self.trunk.forward(g, p, "trunk", images);
        let h = nn::linear(g, p, "embed", flat, 1.0);
        nn::lrelu(g, h)
    }

    pub fn fit(samples: &[Sample], cfg: &OracleTrainConfig) -> Result<Self> {
        let mut ids: Vec<u32> = samples.iter().map(|s| s.factors.identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 32 {
            return Err(Error::InvalidParameter(format!(
                "identity embedder needs >= 32 identities, got {}",
                ids.len()
            )));
        }
        let labels: Vec<usize> = samples
            .iter()
            .map(|s| ids.binary_search(&s.factors.identity_id).expect("id present"))
            .collect();
        let resolution = samples[0].image.resolution();
        let mut model = Self::init(resolution, ids.len(), cfg.seed);
        let (train, holdout) = split(samples.len(), cfg.holdout_fraction, cfg.seed);
        let arch = model.clone();
        train_loop(&mut model.params, &train, cfg, "embedder", |g, p, chunk, rng| {
            let x = g.constant(batch_images(samples, chunk, cfg.input_noise, rng));
            let f = arch.features(g, p, x);
            let logits = nn::linear(g, p, "classify", f, 1.0);
            let lab: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            g.cross_entropy(logits, &lab)
        })?;
        let held: Vec<&Sample> = holdout.iter().map(|&i| &samples[i]).collect();
        let auc = model.pair_auc(&held);
        model.heldout_auc = auc;
        if 1.0 - auc > 3.0 * (1.0 - ID_AUC_TARGET) {
            return Err(Error::TrainingDivergence(format!(
                "held-out identity ROC-AUC {auc:.3} is far below the {ID_AUC_TARGET} target"
            )));
        }
        Ok(model)
    }

    pub fn embed_batch(&self, images: &[&ImageTensor]) -> Vec<Vec<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(ImageTensor::batch(images));
        let f = self.features(&mut g, &p, x);
        g.value(f).data().chunks(EMBED_DIM).map(|c| c.to_vec()).collect()
    }

    pub fn embed(&self, image: &ImageTensor) -> Vec<f32> {
        self.embed_batch(&[image]).remove(0)
    }

    pub fn similarity(&self, a: &ImageTensor, b: &ImageTensor) -> f64 {
        let e = self.embed_batch(&[a, b]);
        cosine(&e[0], &e[1])
    }

    /// ROC-AUC of same-identity vs cross-identity pair similarities.
    pub fn pair_auc(&self, samples: &[&Sample]) -> f64 {
        let imgs: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
        let emb: Vec<Vec<f32>> = imgs.chunks(64).flat_map(|c| self.embed_batch(c)).collect();
        let mut same = Vec::new();
        let mut cross = Vec::new();
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                let s = cosine(&emb[i], &emb[j]);
                if samples[i].factors.identity_id == samples[j].factors.identity_id {
                    same.push(s);
                } else {
                    cross.push(s);
                }
            }
        }
        roc_auc(&same, &cross)
    }

    pub fn resolution(&self) -> usize {
        self.trunk.resolution
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "identity-embedder",
            "oracle",
            serde_json::json!({
                "trunk": self.trunk,
                "num_classes": self.num_classes,
                "heldout_auc": self.heldout_auc,
            }),
            ParamStore::new(),
        );
        c.put_group("params", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("identity-embedder")?;
        Ok(Self {
            trunk: serde_json::from_value(c.metadata["trunk"].clone())?,
            params: c.group("params"),
            num_classes: c.metadata["num_classes"].as_u64().unwrap_or(0) as usize,
            heldout_auc: c.metadata["heldout_auc"].as_f64().unwrap_or(f64::NAN),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub fn fit_identity_embedder(samples: &[Sample], cfg: &OracleTrainConfig) -> Result<IdentityEmbedder> {
    IdentityEmbedder::fit(samples, cfg)
}

pub fn id_similarity(emb: &IdentityEmbedder, x1: &ImageTensor, x2: &ImageTensor) -> f64 {
    emb.similarity(x1, x2)
}

/// Cosine similarity in `f64`, clamped to `[-1, 1]`; exactly 1 for identical inputs.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Mann–Whitney estimate of `P(pos > neg)`, ties counted half.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg_rank;
        i = j + 1;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_self_is_exactly_one_and_symmetric() {
        let a: Vec<f32> = (0..128).map(|i| ((i * 7919) % 101) as f32 / 13.0 - 3.0).collect();
        let b: Vec<f32> = (0..128).map(|i| ((i * 104729) % 97) as f32 / 11.0 - 4.0).collect();
        assert_eq!(cosine(&a, &a), 1.0);
        assert!((cosine(&a, &b) - cosine(&b, &a)).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&cosine(&a, &b)));
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(roc_auc(&[0.0], &[1.0]), 0.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]), 0.5);
    }

    #[test]
    fn regressor_rejects_small_datasets() {
        let data = crate::datagen::sample_dataset(2, 5, 0, 32).unwrap();
        assert!(FactorRegressor::fit(&data, &OracleTrainConfig::default()).is_err());
        assert!(IdentityEmbedder::fit(&data, &OracleTrainConfig::default()).is_err());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (a, b) = split(100, 0.1, 3);
        assert_eq!(b.len(), 10);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
