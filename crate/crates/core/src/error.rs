use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate electrode name {0:?}")]
    DuplicateName(String),
    #[error("no EEG channel of layout {0:?} resolves in the dictionary")]
    EmptyLayout(String),
    #[error("invalid sample rate (source {source_rate} Hz, target {target_rate} Hz)")]
    InvalidRate { source_rate: f64, target_rate: f64 },
    #[error("invalid band [{lo}, {hi}] Hz")]
    InvalidBand { lo: f64, hi: f64 },
    #[error("signal of {samples} samples is shorter than {required} (3x filter length)")]
    SignalTooShort { samples: usize, required: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("{time_patches} time patches exceed the temporal table ({max})")]
    TimeOverflow { time_patches: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("codebook index {index} out of range for {size} entries")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("failed to load batch {batch}: {message}")]
    Load { batch: usize, message: String },
    #[error("worker {rank} diverged from the shared sampler at step {step}")]
    DesyncDetected { step: usize, rank: usize },
    #[error("need at least 5 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("layout {0} does not resolve to at least two EEG channels")]
    UnresolvableLayout(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
