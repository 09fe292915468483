//! Crate-wide error type. Variants mirror the contract failure classes the
//! pipeline distinguishes (and the CLI maps onto exit codes).

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor axis violates a shape or divisibility requirement.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of its legal range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called outside its contract (wrong stage, wrong
    /// state, missing precondition).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values or a numerically unusable input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input is degenerate for the requested computation (rank-deficient,
    /// too small, empty).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A diffusion-schedule index or parameter is invalid.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Synthetic data generation could not satisfy its invariants.
    #[error("generation error: {0}")]
    Generation(String),

    /// Checkpoint serialization, stage or hash mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
