use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration errors:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing {stage} artifact {}: run `t2f {command}` first", path.display())]
    MissingArtifact {
        stage: &'static str,
        command: &'static str,
        path: PathBuf,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("split mismatch: {0}")]
    SplitMismatch(String),

    #[error(transparent)]
    Core(text2freq::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl From<text2freq::Error> for BenchError {
    fn from(e: text2freq::Error) -> Self {
        match e {
            text2freq::Error::NonFiniteLoss { .. } | text2freq::Error::NonFiniteGradient(_) => {
                BenchError::Numeric(e.to_string())
            }
            other => BenchError::Core(other),
        }
    }
}

impl BenchError {
    /// Process exit code: 1 usage or config, 2 missing upstream artifact,
    /// 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::MissingArtifact { .. } => 2,
            BenchError::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
