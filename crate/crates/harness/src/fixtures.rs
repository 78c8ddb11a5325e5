//! The shipped model stack: pretrained generator, oracles, perceptual
//! backbone, edit directions and the pretraining gate record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pti_core::datagen::{
    fit_factor_regressor, fit_identity_embedder, sample_dataset, sample_dataset_from, Factor, FactorRegressor,
    IdentityEmbedder, OracleTrainConfig, Sample,
};
use pti_core::editing::{fit_pca_directions, fit_supervised_direction, EditDirection};
use pti_core::gan::{sample_noise, sample_w, synthesize_batch, GeneratorCheckpoint, Provenance};
use pti_core::perceptual::{feature_distance, PerceptualBackbone};
use pti_core::seed;
use pti_core::training::pretrain;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::error::{HarnessError, Result};

pub const GATE_SAMPLES: usize = 256;
pub const GATE_POOL: usize = 1024;
/// Allowed ratio between a pretraining run's gate value and the reference.
pub const GATE_SLACK: f64 = 1.25;

pub struct FixturePaths {
    pub dir: PathBuf,
}

impl FixturePaths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn generator(&self) -> PathBuf {
        self.dir.join("generator.ckpt")
    }

    pub fn regressor(&self) -> PathBuf {
        self.dir.join("regressor.ckpt")
    }

    pub fn embedder(&self) -> PathBuf {
        self.dir.join("embedder.ckpt")
    }

    pub fn backbone(&self) -> PathBuf {
        self.dir.join("backbone.ckpt")
    }

    pub fn gate(&self) -> PathBuf {
        self.dir.join("gate.json")
    }

    pub fn direction(&self, factor: Factor) -> PathBuf {
        self.dir.join("directions").join(format!("{}.json", factor.name()))
    }

    pub fn pca(&self, k: usize) -> PathBuf {
        self.dir.join("directions").join(format!("pca_{k:02}.json"))
    }
}

fn require(path: PathBuf, command: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(HarnessError::MissingFixture {
            path,
            command: command.into(),
        })
    }
}

/// Mean nearest-neighbour perceptual distance of generator samples to a dataset pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub value: f64,
    pub reference: f64,
    pub samples: usize,
    pub pool: usize,
    pub pretrain_steps: usize,
}

impl GateRecord {
    pub fn passed(&self) -> bool {
        self.value < self.reference * GATE_SLACK
    }
}

pub struct FixtureStack {
    pub generator: GeneratorCheckpoint,
    pub regressor: FactorRegressor,
    pub embedder: IdentityEmbedder,
    pub backbone: PerceptualBackbone,
    pub directions: BTreeMap<&'static str, EditDirection>,
    pub gate: Option<GateRecord>,
    /// Hash of the fixture files, part of every cache key.
    pub digest: String,
}

impl FixtureStack {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let p = FixturePaths::new(&cfg.fixtures);
        let config = "pti --config <cfg>";
        let gen_path = require(p.generator(), &format!("{config} pretrain"))?;
        let reg_path = require(p.regressor(), &format!("{config} fit-oracles"))?;
        let emb_path = require(p.embedder(), &format!("{config} fit-oracles"))?;
        let bb_path = require(p.backbone(), &format!("{config} fit-oracles"))?;
        let mut hasher = Sha256::new();
        for path in [&gen_path, &reg_path, &emb_path, &bb_path] {
            hasher.update(std::fs::read(path).map_err(|e| HarnessError::io(path, e))?);
        }
        let generator = GeneratorCheckpoint::load(&gen_path)?;
        generator.expect_provenance(Provenance::Pretrained)?;
        if generator.resolution() != cfg.resolution {
            return Err(HarnessError::Config(format!(
                "fixture generator is {}px but the config asks for {}px",
                generator.resolution(),
                cfg.resolution
            )));
        }
        let mut directions = BTreeMap::new();
        for f in Factor::ALL {
            let path = require(p.direction(f), &format!("{config} fit-directions"))?;
            hasher.update(std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?);
            directions.insert(f.name(), EditDirection::load(&path)?);
        }
        let gate = if p.gate().exists() {
            let text = std::fs::read_to_string(p.gate()).map_err(|e| HarnessError::io(p.gate(), e))?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        Ok(Self {
            generator,
            regressor: FactorRegressor::load(&reg_path)?,
            embedder: IdentityEmbedder::load(&emb_path)?,
            backbone: PerceptualBackbone::load(&bb_path)?,
            directions,
            gate,
            digest: hex(&hasher.finalize()),
        })
    }

    pub fn direction(&self, factor: Factor) -> &EditDirection {
        &self.directions[factor.name()]
    }
}

pub fn train_dataset(cfg: &RunConfig) -> Result<Vec<Sample>> {
    Ok(sample_dataset(cfg.train_identities, cfg.samples_per_identity, cfg.data_seed, cfg.resolution)?)
}

/// Held-out renders: one per identity, identities disjoint from training.
pub fn eval_set(cfg: &RunConfig) -> Result<Vec<Sample>> {
    Ok(sample_dataset_from(cfg.eval_images, 1, cfg.eval_seed, cfg.resolution, cfg.eval_id_offset)?)
}

pub fn fit_oracles(cfg: &RunConfig) -> Result<()> {
    let p = FixturePaths::new(&cfg.fixtures);
    std::fs::create_dir_all(&p.dir).map_err(|e| HarnessError::io(&p.dir, e))?;
    let data = train_dataset(cfg)?;
    let ocfg = OracleTrainConfig {
        epochs: cfg.oracle_epochs,
        seed: cfg.seed,
        ..OracleTrainConfig::default()
    };
    let reg = fit_factor_regressor(&data, &ocfg)?;
    log::info!("factor regressor held-out pose MAE {:.3}", reg.heldout_pose_mae);
    reg.save(&p.regressor())?;
    let images: Vec<_> = data.iter().take(GATE_POOL).map(|s| &s.image).collect();
    PerceptualBackbone::from_regressor(&reg, &images)?.save(&p.backbone())?;
    let emb = fit_identity_embedder(&data, &ocfg)?;
    log::info!("identity embedder held-out AUC {:.4}", emb.heldout_auc);
    emb.save(&p.embedder())?;
    Ok(())
}

/// Mean over generator samples of the perceptual distance to the nearest
/// image of a dataset pool.
pub fn gate_value(gen: &GeneratorCheckpoint, backbone: &PerceptualBackbone, pool: &[Sample], seed: u64) -> Result<f64> {
    let pool_feats: Vec<_> = pool.iter().map(|s| backbone.features(&s.image)).collect();
    let s = seed::derive_tagged(seed, "gate", 0);
    let ws = sample_w(s, 0, GATE_SAMPLES, gen)?;
    let noise: Vec<_> = (0..GATE_SAMPLES)
        .map(|i| sample_noise(seed::derive(s, i as u64 + 1), gen))
        .collect();
    let images = synthesize_batch(&ws, &noise, 1.0, gen)?;
    let total: f64 = images
        .iter()
        .map(|im| {
            let f = backbone.features(im);
            pool_feats
                .iter()
                .map(|pf| feature_distance(&f, pf))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / GATE_SAMPLES as f64)
}

/// Pretrains the generator and records its gate value. The first run in a
/// fixture directory becomes the reference.
pub fn pretrain_fixture(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<GateRecord> {
    let p = FixturePaths::new(&cfg.fixtures);
    let bb_path = require(p.backbone(), "pti --config <cfg> fit-oracles")?;
    let backbone = PerceptualBackbone::load(&bb_path)?;
    let data = train_dataset(cfg)?;
    let out = pretrain(&data, &cfg.pretrain(), run_dir)?;
    let pool: Vec<Sample> = data.iter().step_by((data.len() / GATE_POOL).max(1)).take(GATE_POOL).cloned().collect();
    let value = gate_value(&out.generator, &backbone, &pool, cfg.seed)?;
    let reference = if p.gate().exists() {
        let text = std::fs::read_to_string(p.gate()).map_err(|e| HarnessError::io(p.gate(), e))?;
        serde_json::from_str::<GateRecord>(&text)?.reference
    } else {
        value
    };
    let rec = GateRecord {
        value,
        reference,
        samples: GATE_SAMPLES,
        pool: pool.len(),
        pretrain_steps: cfg.pretrain_steps,
    };
    let target = if p.generator().exists() { p.dir.join("generator.candidate.ckpt") } else { p.generator() };
    out.generator.save(&target)?;
    if !p.gate().exists() {
        std::fs::write(p.gate(), serde_json::to_string_pretty(&rec)?).map_err(|e| HarnessError::io(p.gate(), e))?;
    }
    Ok(rec)
}

pub fn fit_directions(cfg: &RunConfig) -> Result<()> {
    let p = FixturePaths::new(&cfg.fixtures);
    let gen = GeneratorCheckpoint::load(&require(p.generator(), "pti --config <cfg> pretrain")?)?;
    let reg = FactorRegressor::load(&require(p.regressor(), "pti --config <cfg> fit-oracles")?)?;
    let dir = p.dir.join("directions");
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    for f in Factor::ALL {
        let d = fit_supervised_direction(&gen, &reg, f, cfg.direction_samples, cfg.seed)?;
        log::info!(
            "{} direction: {:.0}% of probes increase the factor",
            f.name(),
            100.0 * d.metadata.orientation_fraction.unwrap_or(f64::NAN)
        );
        d.save(&p.direction(f))?;
    }
    for (k, d) in fit_pca_directions(&gen, cfg.pca_samples, cfg.pca_components, cfg.seed)?
        .into_iter()
        .enumerate()
    {
        d.save(&p.pca(k))?;
    }
    Ok(())
}
