//! Procedural face world with known generative factors, its corruptions, and
//! the oracles trained on it.

mod dataset;
mod ood;
mod oracles;
mod render;

pub use dataset::{item_factors, load_dataset, sample_dataset, sample_dataset_from, save_dataset, Sample};
pub use ood::{apply_ood, OodKind};
pub use oracles::{
    cosine, fit_factor_regressor, fit_identity_embedder, id_similarity, predict_factors, roc_auc, FactorRegressor,
    IdentityEmbedder, OracleTrainConfig, ID_AUC_TARGET, POSE_MAE_TARGET,
};
pub use render::{
    face_mask, render, render_unchecked, ContinuousFactors, Factor, FactorVector, IdentityAttributes, AGE_RANGE,
    POSE_RANGE, SMILE_RANGE, SUPPORTED_RESOLUTIONS,
};
