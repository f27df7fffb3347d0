// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate series: {0}")]
    Degenerate(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty routing at layer {layer}: every routed expert is blocked")]
    EmptyRouting { layer: usize },
    #[error("intervention spec error: {0}")]
    Spec(String),
    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },
    #[error("vocabulary error: unknown word {0:?}")]
    Vocabulary(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("planting error: {reason} (worst margin {worst_margin:.4})")]
    Planting { reason: String, worst_margin: f64 },
    #[error("trace error: {0}")]
    Trace(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
