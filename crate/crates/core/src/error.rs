use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit-code contract: `Usage`/`Config` style
/// problems are caller mistakes, `Parse`/`Schema` are data problems, and
/// `Shape`/`Numeric`/`Internal` are computation failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite value produced or consumed where finite reals are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid parameter or configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A line of an NDJSON input could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Structurally valid input that violates the dataset schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Invariant broken inside the library itself.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
