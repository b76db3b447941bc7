use std::path::PathBuf;

/// Errors raised by the simulation, learning and analysis routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("integration failed at step {step}: state became non-finite")]
    IntegrationFailure { step: usize },

    #[error("state diverged at frame {frame} (|x| = {magnitude:e})")]
    Diverged { frame: usize, magnitude: f64 },

    #[error("delay history underflow: requested t = {requested}, earliest stored t = {earliest}")]
    HistoryUnderflow { requested: f64, earliest: f64 },

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("empty link list")]
    EmptyLinks,

    #[error("spectral radius {radius:e} is too small to rescale")]
    NilpotentAdjacency { radius: f64 },

    #[error("power iteration did not converge after {iters} iterations (last delta {last_delta:e})")]
    NonConvergence { iters: usize, last_delta: f64 },

    #[error("index mismatch: expected {expected} phases, got {actual}")]
    IndexMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("insufficient data: need {needed} frames, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("singular system: regularized Gram matrix is not positive definite")]
    Singular,

    #[error("prediction diverged at frame {frame}")]
    PredictionDiverged { frame: usize },

    #[error("order parameter did not reach equilibrium within {frames} frames")]
    NoEquilibrium { frames: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("trajectory too short: need {needed} frames, have {available}")]
    TooShort { needed: usize, available: usize },

    #[error("window {window} too large for series of length {len}")]
    WindowTooLarge { window: usize, len: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bundle incompatible: {0}")]
    BundleIncompatible(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable category name, used for CLI exit codes and logs.
    pub fn category(&self) -> &'static str {
        match self {
            Error::IntegrationFailure { .. } | Error::Diverged { .. } => "integration",
            Error::HistoryUnderflow { .. } => "history",
            Error::DegenerateTrajectory(_) | Error::TooShort { .. } => "data",
            Error::InsufficientData { .. } | Error::WindowTooLarge { .. } => "data",
            Error::EmptyLinks | Error::NilpotentAdjacency { .. } => "topology",
            Error::NonConvergence { .. } | Error::Singular => "numerics",
            Error::IndexMismatch { .. } | Error::DimensionMismatch(_) => "shape",
            Error::PredictionDiverged { .. } | Error::NoEquilibrium { .. } => "dynamics",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::BundleIncompatible(_) | Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "format",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
