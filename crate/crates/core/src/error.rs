use thiserror::Error;

/// Error type shared by every module of the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths do not line up (e.g. odd vector width for rotary).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An index or count is outside its allowed range.
    #[error("out of range: {0}")]
    Range(String),

    /// The sampled frame count does not divide evenly into segments.
    #[error("{frames} frames do not split into segments of {segment}")]
    Divisibility { frames: usize, segment: usize },

    /// A caller broke an operation's contract (e.g. empty user query).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Workload calibration could not reach its target.
    #[error("calibration failed: {0}")]
    Calibration(String),
}

pub type Result<T> = std::result::Result<T, Error>;
