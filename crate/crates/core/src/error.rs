use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("factor `{name}` = {value} is outside [{min}, {max}]")]
    FactorOutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("W+ code rows differ; cannot collapse to W")]
    NotCollapsible,
    #[error("truncation with psi < 1 requires a cached mean latent")]
    MissingMeanLatent,
    #[error("direction between latent codes is degenerate (norm {0:e})")]
    DegenerateDirection(f64),
    #[error("optimization diverged at step {step}: {what}")]
    Divergence { step: usize, what: String, trace: Vec<f64> },
    #[error("training did not reach its target: {0}")]
    TrainingDivergence(String),
    #[error("edit direction orientation is ambiguous: {0:.2} of probes increase the factor")]
    OrientationAmbiguous(f64),
    #[error("target edit delta {target} unreachable; beta_max={beta_max} gives {achieved}")]
    Unreachable {
        target: f64,
        beta_max: f64,
        achieved: f64,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("wrong checkpoint provenance: expected {expected}, found {found}")]
    Provenance { expected: String, found: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
