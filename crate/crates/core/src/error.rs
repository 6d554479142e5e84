use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("audio too short: {got} samples, need at least {need}")]
    AudioTooShort { got: usize, need: usize },

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate audio embedding (zero norm)")]
    DegenerateAudio,

    #[error("contrastive loss needs >=2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("no evaluation pairs")]
    NoEvaluationPairs,

    #[error("split `{0}` lacks ground-truth masks")]
    MissingGroundTruth(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (samples: {sample_ids:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        sample_ids: Vec<String>,
    },

    #[error("checkpoint config hash mismatch: checkpoint has {found}, config expects {expected}")]
    CheckpointMismatch { expected: String, found: String },

    #[error("malformed dataset layout at {path}: {reason}")]
    Layout { path: PathBuf, reason: String },

    #[error("{path}:{line}: corrupted log line: {reason}")]
    CorruptLog {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("wav codec error at {path}: {reason}")]
    Wav { path: PathBuf, reason: String },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    /// Short machine-readable error kind, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::AudioTooShort { .. } => "audio_too_short",
            Error::InvalidWaveform(_) => "invalid_waveform",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::DegenerateAudio => "degenerate_audio",
            Error::BatchTooSmall(_) => "batch_too_small",
            Error::NoEvaluationPairs => "no_evaluation_pairs",
            Error::MissingGroundTruth(_) => "missing_ground_truth",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::CheckpointMismatch { .. } => "checkpoint_mismatch",
            Error::Layout { .. } => "layout",
            Error::CorruptLog { .. } => "corrupt_log",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Wav { .. } => "wav",
            Error::Serde(_) => "serde",
            Error::Plot(_) => "plot",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
