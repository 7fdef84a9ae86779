//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A graph failed a structural requirement (empty, bad node id, bad weight).
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    /// Matrix or operator shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration value is out of range or not valid for the chosen method.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Input data could not be read or parsed.
    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value appeared where the computation requires finite ones.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
