use std::path::PathBuf;

/// Crate-wide error type. Every failure carries enough context to act on:
/// shape errors name the offending dimensions, cache errors name the class
/// and the shortfall, file errors name the path.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: stride must be positive")]
    NonPositiveStride { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("backward already ran on this tape; build a fresh tape per step")]
    BackwardConsumed,

    #[error("non-finite loss at epoch {epoch}, phase {phase}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        phase: &'static str,
        step: usize,
    },

    #[error("non-finite values during sampling at step {step}")]
    NonFiniteSample { step: usize },

    #[error(
        "generation cache exhausted for class {class}: need {need} records, cache holds {have}; raise diffusion.records_per_class and rerun `jolt build-cache --force`"
    )]
    InsufficientCache {
        class: usize,
        need: usize,
        have: usize,
    },

    #[error("shot count {shots} is not one of 1/2/4/8/16 (pass allow_any_shots to override)")]
    NonStandardShots { shots: usize },

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("missing artifact: {what}; run `jolt {producer}` first")]
    MissingArtifact {
        what: String,
        producer: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
