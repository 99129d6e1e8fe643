//! Dual-stream reciprocal disentanglement learning for unsupervised
//! domain-adaptive re-identification, at desk scale.
//!
//! The model holds two convolutional encoders and two classifier heads:
//!
//! * `e1` extracts id-related content features, pooled by a fusion block
//!   (average pool + max pool, summed elementwise),
//! * `e2` extracts id-unrelated style features (average pool only),
//! * `w1` classifies person identities over the source label set,
//! * `w2` classifies cameras over both domains plus one extra class.
//!
//! Training alternates a supervised pretraining phase with an adversarial
//! phase in which the four parameter groups are updated in a fixed order
//! per batch, each against its own objective. The `synth` module generates
//! a fully factorized benchmark (identity content x camera style) so every
//! claim about disentanglement is testable on a laptop core.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod probe;
pub mod reconduct;
pub mod svg;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod util;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("empty dataset at {0}")]
    EmptyDataset(PathBuf),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite {quantity} at epoch {epoch}, iteration {iteration}")]
    NonFinite {
        quantity: String,
        epoch: usize,
        iteration: usize,
    },
    #[error("class index {index} out of range (width {width}) in {context}")]
    ClassOutOfRange {
        index: usize,
        width: usize,
        context: String,
    },
    #[error("{0}")]
    InvalidInput(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
