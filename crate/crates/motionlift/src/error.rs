//! Error types shared across the crate.
//!
//! Each enum maps onto one process exit code (see [`crate::cli`]): config
//! errors exit 2, data errors exit 3, numeric failures exit 4 and gradient
//! check failures exit 5.

use thiserror::Error;

/// Errors raised by dataset generation, validation and file I/O.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("record {record} (line {line}): malformed record: {message}")]
    MalformedRecord {
        record: String,
        line: usize,
        message: String,
    },

    #[error(
        "record {record}: {field} has shape {found:?}, expected {expected:?} \
         from the declared frames/joints header"
    )]
    ShapeMismatch {
        record: String,
        field: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("record {record}: {field} contains a non-finite value at index {index:?}")]
    NonFinite {
        record: String,
        field: String,
        index: Vec<usize>,
    },

    #[error("record {record}: confidence {value} at index {index:?} is outside [0, 1]")]
    ConfidenceRange {
        record: String,
        value: f64,
        index: Vec<usize>,
    },

    #[error("invalid topology: {0}")]
    BadTopology(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Errors raised by the network forward/backward contract.
#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("input shape {found:?} does not match the configured {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite attention logits in layer {layer} ({module})")]
    NonFiniteLogits { layer: usize, module: String },

    #[error("batch normalization in training mode needs at least 2 tokens, got {tokens}")]
    BatchTooSmall { tokens: usize },

    #[error("mode=action requires action_classes in the network config")]
    ActionHeadMissing,

    #[error("invalid network config: {0}")]
    BadConfig(String),
}

/// Errors raised by training loops (pre-training and fine-tuning).
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("mask plan is degenerate: round({prob} * {length}) = {count} would mask {what}")]
    DegenerateMask {
        prob: f64,
        length: usize,
        count: usize,
        what: &'static str,
    },

    #[error("teacher/student parameter shape mismatch for {name}")]
    TeacherShapeMismatch { name: String },

    #[error("prediction is all zero; the optimal scale is undefined")]
    ZeroPrediction,

    #[error("velocity loss needs at least 2 frames, got {frames}")]
    TooFewFrames { frames: usize },

    #[error("action label {label} is outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("a sequence needed for action training has no label")]
    MissingLabel,

    #[error("loss shape mismatch: prediction {pred:?} vs target {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },

    #[error(transparent)]
    Metric(#[from] MetricError),

    #[error("invalid training config: {0}")]
    BadConfig(String),
}

/// Errors raised by metric evaluation.
#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },

    #[error("degenerate alignment target: centered ground truth has rank 0")]
    DegenerateAlignment,

    #[error("prediction is all zero; optimal scale is undefined")]
    ZeroPrediction,

    #[error("dataset kind does not match protocol {protocol}: {reason}")]
    ProtocolMismatch { protocol: String, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Errors raised when reading or writing checkpoint files.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected MLFTCKP1")]
    BadMagic,

    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),

    #[error("payload digest mismatch: stored {stored}, computed {computed}")]
    DigestMismatch { stored: String, computed: String },

    #[error("tensor table does not match the model: {0}")]
    TensorMismatch(TensorMismatch),
}

/// Names the tensors that disagree between a checkpoint and a model.
#[derive(Debug, Default)]
pub struct TensorMismatch {
    /// Present in the model but absent from the checkpoint.
    pub missing: Vec<String>,
    /// Present in the checkpoint but unknown to the model.
    pub unexpected: Vec<String>,
    /// Present in both with different shapes: (name, model shape, stored shape).
    pub shape: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl TensorMismatch {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.shape.is_empty()
    }
}

impl std::fmt::Display for TensorMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if !self.missing.is_empty() {
            parts.push(format!("missing [{}]", self.missing.join(", ")));
        }
        if !self.unexpected.is_empty() {
            parts.push(format!("unexpected [{}]", self.unexpected.join(", ")));
        }
        for (name, want, got) in &self.shape {
            parts.push(format!("{name} shaped {got:?}, model wants {want:?}"));
        }
        write!(f, "{}", parts.join("; "))
    }
}

/// Errors raised while loading or validating a run configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse config: {0}")]
    Parse(String),

    #[error("invalid config: {0}")]
    Invalid(String),
}
