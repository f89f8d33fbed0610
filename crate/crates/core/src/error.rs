//! Error types for every layer of the engine.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range 0..{bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable does not belong to this tape")]
    ForeignVar,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence of length {len} is too short; at least {min} tokens are needed")]
    SequenceTooShort { len: usize, min: usize },
    #[error("token id {id} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfVocab {
        id: u32,
        position: usize,
        vocab: usize,
    },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}, expected \"PDPT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found}, this build reads version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("expected a {expected} payload, found {found}")]
    PayloadType {
        expected: &'static str,
        found: &'static str,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}; training aborted")]
    NonFinite { epoch: usize, step: usize, loss: f32 },
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("checksum mismatch for {path}: manifest says {expected}, file hashes to {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("branch {label:?} has no checkpoint file to reload from")]
    MissingCheckpoint { label: String },
    #[error("branch {label:?} produced a non-finite loss {loss}")]
    NonFinite { label: String, loss: f32 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvmError {
    #[error("training needs at least two labels, found {0}")]
    TooFewLabels(usize),
    #[error("feature dimension {got} does not match model dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("empty training set")]
    Empty,
    #[error("invalid svm config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no valid records in {path} ({rejected} rejected)")]
    NoRecords { path: PathBuf, rejected: usize },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("label {label:?} has {count} records, fewer than k = {k}")]
    TooFewForFolds { label: String, count: usize, k: usize },
    #[error("invalid fold count k = {0}")]
    InvalidK(usize),
    #[error("synthetic sources {a:?} and {b:?} are too similar: distance {distance:.4} < floor {floor:.4}")]
    SourcesTooSimilar {
        a: String,
        b: String,
        distance: f64,
        floor: f64,
    },
    #[error("invalid synthetic source: {0}")]
    InvalidSource(String),
    #[error("invalid corpus: {0}")]
    Invalid(String),
}
