use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] pti_core::Error),
    #[error("missing fixture {path}; build it with `{command}`")]
    MissingFixture { path: PathBuf, command: String },
    #[error("config: {0}")]
    Config(String),
    #[error("acceptance gate failed: {}", .0.join(", "))]
    GateFailure(Vec<String>),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for a failed gate, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::GateFailure(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
