//! Sketch-to-3D pipeline.
//!
//! A U-Net translates line sketches into semantic segmentation masks while its
//! bottleneck embedding is aligned to the style space of a frozen mask-to-3D
//! module. The frozen module supplies style-vector training targets and renders
//! color and semantic images of the result from novel viewpoints via tri-plane
//! volumetric rendering.

pub mod augment;
pub mod config;
pub mod datagen;
pub mod embedview;
pub mod imagery;
pub mod losses;
pub mod mask23d;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sketch2mask;
pub mod training;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file content; `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    /// A value violated a domain invariant.
    #[error("value error: {0}")]
    Value(String),
    /// A configuration or shape contract was violated.
    #[error("config error: {0}")]
    Config(String),
    /// A numeric procedure failed to converge or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An operation was attempted in an invalid state (e.g. updating frozen parameters).
    #[error("state error: {0}")]
    State(String),
    /// A metric is undefined on the given input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
