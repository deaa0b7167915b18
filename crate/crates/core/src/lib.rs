//! Role- and domain-aware multi-agent trajectory modeling.
//!
//! A masked-trajectory CVAE whose per-agent latents pass through a
//! label-conditioned cross-attention adapter with token-wise gating, trained
//! with a two-space contrastive objective. Everything runs on the small
//! reverse-mode tape in [`numerics`]; the rest of the crate covers synthetic
//! multi-sport data, metrics, statistical baselines and the evaluation
//! protocols.
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod adapter;
pub mod contrastive;
pub mod data;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod seed;
pub mod train;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/contrastive.md")]
    mod contrastive {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

pub use data::{Dataset, FieldBounds, Role, SceneSequence, Team};
pub use numerics::{Array, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Param(#[from] params::ParamError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("checkpoint format `{found}` is not supported (expected `{expected}`)")]
    CheckpointVersion { found: String, expected: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn json(path: &std::path::Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
        move |source| Error::Json { path: path.display().to_string(), source }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Numerics(_) => "numerics",
            Error::Param(_) => "parameter",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Csv(_) => "csv",
            Error::Diverged { .. } => "diverged",
            Error::CheckpointVersion { .. } => "checkpoint_version",
        }
    }
}
