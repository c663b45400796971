use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, keys or values; exit code 2.
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Core(#[from] snapddm_core::Error),

    #[error(transparent)]
    Nn(#[from] snapddm_nn::NnError),

    #[error(transparent)]
    Bench(#[from] snapddm_bench::BenchError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
