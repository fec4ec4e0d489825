//! Desk-scale federated self-training laboratory for per-pixel
//! classification under domain shift.
//!
//! A server pretrains on a labeled source domain, then coordinates
//! rounds of unsupervised (or semi-supervised) local training on
//! non-IID clients whose data it never sees, aggregating with FedAvg
//! or FedSWA. Local training builds on confidence-masked pseudo-labels,
//! dual weak-to-strong consistency, a frozen or EMA teacher, and
//! distillation from a frozen prior predictor. Everything runs on a
//! procedural multi-domain segmentation benchmark small enough that a
//! full federation finishes in minutes and every gradient is checkable
//! against central finite differences.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod fed;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod report;
pub mod rng;
pub mod sched;
pub mod synthdata;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty tensor")]
    EmptyTensor,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("diverged")]
    Diverged,
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("missing required config key `{0}`")]
    MissingKey(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no classes present")]
    NoClassesPresent,
    #[error("source data sealed")]
    SourceSealed,
    #[error("empty client dataset")]
    EmptyClient,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code: 2 config error, 3 numeric divergence, 4 I/O error,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::MissingKey(_) | Error::InvalidArgument(_) => 2,
            Error::Diverged | Error::NonFinite(_) => 3,
            Error::Io(_) | Error::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}
