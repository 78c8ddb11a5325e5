//! Run configuration: a flat TOML file of `key = value` pairs.
//!
//! Every key is optional and falls back to the default listed in
//! [`RunConfig::default`]. Unknown keys are rejected. `fixtures` and `cache`
//! are resolved relative to the directory holding the config file.

use std::path::{Path, PathBuf};

use pti_core::gan::LatentSpace;
use pti_core::inversion::InversionConfig;
use pti_core::pivotal::{Alpha, TuningConfig};
use pti_core::training::PretrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// `alpha = "auto"` or an absolute radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Absolute(f64),
    Named(String),
}

impl AlphaSetting {
    pub fn to_alpha(&self) -> Result<Alpha> {
        match self {
            Self::Absolute(a) => Ok(Alpha::Absolute(*a)),
            Self::Named(s) if s == "auto" => Ok(Alpha::Auto),
            Self::Named(s) => Err(HarnessError::Config(format!("alpha must be a number or \"auto\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub resolution: usize,
    #[serde(skip_serializing)]
    pub fixtures: PathBuf,
    #[serde(skip_serializing)]
    pub cache: Option<PathBuf>,

    // data
    pub train_identities: usize,
    pub samples_per_identity: usize,
    pub data_seed: u64,
    pub eval_images: usize,
    pub eval_id_offset: u32,
    pub eval_seed: u64,

    // pretraining and oracles
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f32,
    pub r1_gamma: f32,
    pub latent_dim: usize,
    pub oracle_epochs: usize,

    // inversion
    pub inversion_steps: usize,
    pub inversion_lr: f32,
    pub lambda_n: f64,

    // pivotal tuning
    pub tuning_steps: usize,
    pub tuning_lr: f32,
    pub lambda_l2: f64,
    pub lambda_lpips: f64,
    pub regularization: bool,
    pub alpha: AlphaSetting,
    pub lambda_r: f64,
    pub lambda_r_l2: f64,
    pub n_r: usize,

    // editing
    pub direction_samples: usize,
    pub pca_samples: usize,
    pub pca_components: usize,
    /// Pose change (degrees) the shared latent edit produces on the pretrained generator.
    pub same_edit_pose: f64,
    /// Pose change (degrees) every method is calibrated to in the same-magnitude study.
    pub pose_delta: f64,
    pub smile_delta: f64,
    pub age_delta: f64,
    /// Upper bound of the calibration search, in units of the generator's auto alpha.
    pub beta_max_factor: f64,

    // experiments
    pub drift_probes: usize,
    /// Multiples of the auto alpha.
    pub alpha_sweep: Vec<f64>,
    pub multi_id: usize,
    /// Joint tuning steps for MultiId; `tuning_steps × multi_id` when unset,
    /// so every identity gets the single-image budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_id_steps: Option<usize>,
    pub smoke_image: usize,
    pub reg_study_images: usize,
    pub ood_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 32,
            fixtures: PathBuf::from("fixtures"),
            cache: None,
            train_identities: 500,
            samples_per_identity: 20,
            data_seed: 1,
            eval_images: 32,
            eval_id_offset: 1_000_000,
            eval_seed: 7,
            pretrain_steps: 20_000,
            pretrain_batch: 8,
            pretrain_lr: 2.5e-3,
            r1_gamma: 1.0,
            latent_dim: 64,
            oracle_epochs: 30,
            inversion_steps: 450,
            inversion_lr: 5e-3,
            lambda_n: 1e5,
            tuning_steps: 350,
            tuning_lr: 3e-4,
            lambda_l2: 1.0,
            lambda_lpips: 1.0,
            regularization: true,
            alpha: AlphaSetting::Named("auto".into()),
            lambda_r: 0.1,
            lambda_r_l2: 1.0,
            n_r: 1,
            direction_samples: 2000,
            pca_samples: 10_000,
            pca_components: 8,
            same_edit_pose: 10.0,
            pose_delta: 5.0,
            smile_delta: 0.3,
            age_delta: 0.2,
            beta_max_factor: 4.0,
            drift_probes: 64,
            alpha_sweep: vec![0.1, 0.25, 0.5, 0.75, 1.0, 2.0],
            multi_id: 8,
            multi_id_steps: None,
            smoke_image: 0,
            reg_study_images: 1,
            ood_images: 4,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.fixtures = base_dir.join(&cfg.fixtures);
        cfg.cache = cfg.cache.map(|c| base_dir.join(c));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if ![32, 64].contains(&self.resolution) {
            return bad(format!("resolution must be 32 or 64, got {}", self.resolution));
        }
        if self.eval_images == 0 {
            return bad("eval_images must be >= 1".into());
        }
        if self.smoke_image >= self.eval_images {
            return bad(format!("smoke_image {} >= eval_images {}", self.smoke_image, self.eval_images));
        }
        if self.multi_id == 0 || self.multi_id > self.eval_images {
            return bad(format!("multi_id must be in 1..={}", self.eval_images));
        }
        if self.multi_id_steps == Some(0) {
            return bad("multi_id_steps must be >= 1".into());
        }
        if self.reg_study_images == 0 || self.reg_study_images > self.eval_images {
            return bad(format!("reg_study_images must be in 1..={}", self.eval_images));
        }
        if self.alpha_sweep.len() < 2 || self.alpha_sweep.iter().any(|a| !(*a > 0.0)) {
            return bad("alpha_sweep needs at least two positive multiples".into());
        }
        self.alpha.to_alpha()?;
        self.inversion(LatentSpace::W).validate()?;
        self.tuning()?.validate()?;
        self.pretrain().validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form. Paths are excluded so the
    /// hash depends only on what is computed.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn inversion(&self, space: LatentSpace) -> InversionConfig {
        InversionConfig {
            space,
            steps: self.inversion_steps,
            learning_rate: self.inversion_lr,
            lambda_n: self.lambda_n,
            seed: self.seed,
            ..InversionConfig::default()
        }
    }

    pub fn tuning(&self) -> Result<TuningConfig> {
        Ok(TuningConfig {
            steps: self.tuning_steps,
            learning_rate: self.tuning_lr,
            lambda_l2: self.lambda_l2,
            lambda_lpips: self.lambda_lpips,
            regularization_enabled: self.regularization,
            alpha: self.alpha.to_alpha()?,
            lambda_r: self.lambda_r,
            lambda_r_l2: self.lambda_r_l2,
            n_r: self.n_r,
            seed: self.seed,
            ..TuningConfig::default()
        })
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            lr_g: self.pretrain_lr,
            lr_d: self.pretrain_lr,
            r1_gamma: self.r1_gamma,
            seed: self.seed,
            resolution: self.resolution,
            latent_dim: self.latent_dim,
            ..PretrainConfig::default()
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("", Path::new("/x")).unwrap();
        assert_eq!(c.inversion_steps, 450);
        assert_eq!(c.fixtures, PathBuf::from("/x/fixtures"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::parse("inversion_stpes = 3", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("inversion_stpes"), "{e}");
    }

    #[test]
    fn alpha_accepts_auto_or_number() {
        let c = RunConfig::parse("alpha = 2.5", Path::new(".")).unwrap();
        assert_eq!(c.tuning().unwrap().alpha, Alpha::Absolute(2.5));
        assert!(RunConfig::parse("alpha = \"big\"", Path::new(".")).is_err());
    }

    #[test]
    fn hash_ignores_paths_but_not_values() {
        let a = RunConfig::parse("", Path::new("/a")).unwrap();
        let b = RunConfig::parse("", Path::new("/b")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::parse("tuning_steps = 10", Path::new("/a")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn resolved_config_round_trips() {
        let a = RunConfig::parse("seed = 3\nalpha = 1.5", Path::new(".")).unwrap();
        let b = RunConfig::parse(&a.to_toml(), Path::new(".")).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("resolution = 48", Path::new(".")).is_err());
        assert!(RunConfig::parse("tuning_steps = 0", Path::new(".")).is_err());
        assert!(RunConfig::parse("smoke_image = 40", Path::new(".")).is_err());
    }
}
