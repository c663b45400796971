use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("degenerate reference: mean |b| is zero")]
    DegenerateReference,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid material: {0}")]
    InvalidMaterial(String),

    #[error("invalid PML: {0}")]
    InvalidPml(String),

    #[error("invalid Bloch boundary: {0}")]
    InvalidBloch(String),

    #[error("resonant/ill-posed system: {0}")]
    Singular(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("geometry generation failed after {attempts} attempts: {reason}")]
    DegenerateGeometry { attempts: usize, reason: String },

    #[error("trace line {index} on {edge} has no inward neighbor in a {extent}-cell domain")]
    NoInwardNeighbor {
        edge: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("invalid tiling: {0}")]
    InvalidTiling(String),

    #[error("subdomain {id} failed: {reason}")]
    SubdomainFailure { id: usize, reason: String },

    #[error("no solver registered for class {0}")]
    MissingSolver(String),

    #[error("DDM diverged at iteration {iteration}: residual {residual:.3e} vs minimum {minimum:.3e}")]
    Diverged {
        iteration: usize,
        residual: f64,
        minimum: f64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
