use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input text is empty")]
    EmptyText,
    #[error("unknown grapheme {token:?} at position {position}")]
    UnknownGrapheme { token: String, position: usize },
    #[error("unknown phone symbol {0:?}")]
    UnknownPhone(String),
    #[error("invalid lexicon line {line}: {reason}")]
    InvalidLexicon { line: usize, reason: String },

    #[error("malformed alignment at line {line}: {reason}")]
    MalformedAlignment { line: usize, reason: String },
    #[error("alignment intervals overlap at interval {index}")]
    OverlappingIntervals { index: usize },
    #[error("alignment spans {aligned:.4}s but audio lasts {audio:.4}s")]
    AlignmentSpan { aligned: f64, audio: f64 },
    #[error("cannot give {phones} phones at least one frame each within {frames} frames")]
    InfeasibleDurations { phones: usize, frames: usize },
    #[error("phone {index} has a zero duration")]
    ZeroDuration { index: usize },

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("audio has {samples} samples, at least {required} are needed")]
    AudioTooShort { samples: usize, required: usize },

    #[error("no complete utterances under {0}")]
    EmptyCorpus(PathBuf),
    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),

    #[error("phone id {id} is outside the vocabulary of {vocab}")]
    IndexOutOfVocab { id: usize, vocab: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("target speaker corpus is empty")]
    EmptyTargetCorpus,
    #[error("waveform of {samples} samples does not match {frames} mel frames")]
    MisalignedPair { samples: usize, frames: usize },
    #[error("vocoder adaptation set is empty")]
    EmptyAdaptationSet,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("corrupt artifact: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected}); {hint}")]
    VersionMismatch {
        found: u32,
        expected: u32,
        hint: String,
    },
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigHashMismatch { found: String, expected: String },
    #[error("output directory {0} is locked by a running process")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

/// Coarse error classes; the CLI maps each one to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Config,
    Corpus,
    Frontend,
    Checkpoint,
    Model,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Config => "config",
            ErrorCategory::Corpus => "corpus",
            ErrorCategory::Frontend => "frontend",
            ErrorCategory::Checkpoint => "checkpoint",
            ErrorCategory::Model => "model",
            ErrorCategory::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 2,
            ErrorCategory::Config => 3,
            ErrorCategory::Corpus => 4,
            ErrorCategory::Frontend => 5,
            ErrorCategory::Checkpoint => 6,
            ErrorCategory::Model => 7,
            ErrorCategory::Io => 8,
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            EmptyText
            | UnknownGrapheme { .. }
            | UnknownPhone(_)
            | InvalidLexicon { .. }
            | MalformedAlignment { .. }
            | OverlappingIntervals { .. }
            | AlignmentSpan { .. }
            | InfeasibleDurations { .. }
            | ZeroDuration { .. }
            | UnsupportedFormat(_)
            | EmptyAudio
            | AudioTooShort { .. } => ErrorCategory::Frontend,
            EmptyCorpus(_) | UnknownSpeaker(_) | EmptyTargetCorpus | EmptyAdaptationSet => {
                ErrorCategory::Corpus
            }
            IndexOutOfVocab { .. }
            | LengthMismatch { .. }
            | ShapeMismatch { .. }
            | MisalignedPair { .. }
            | Tensor(_) => ErrorCategory::Model,
            ConfigInvalid(_) | Locked(_) => ErrorCategory::Config,
            MissingCheckpoint(_)
            | CorruptCheckpoint(_)
            | VersionMismatch { .. }
            | ConfigHashMismatch { .. } => ErrorCategory::Checkpoint,
            Io(_) | Json(_) => ErrorCategory::Io,
        }
    }
}
