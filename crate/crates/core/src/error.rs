use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task spec: {0}")]
    InvalidTaskSpec(String),

    #[error("classes appear in more than one split: {classes:?}")]
    Overlap { classes: Vec<String> },

    #[error("split lists class {class:?} which is absent from the index")]
    MissingClass { class: String },

    #[error("split {split:?} has no classes")]
    EmptySplit { split: String },

    #[error("episode needs {needed} classes but only {available} are available")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("class {class:?} has {available} samples, {needed} needed (short by {})", needed - available)]
    InsufficientSamples {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: line {line}: duplicate sample ({sample:?}, {class:?})")]
    DuplicateSample {
        path: PathBuf,
        line: u64,
        sample: String,
        class: String,
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: String, message: String },

    #[error("image of {width}x{height} px is too small (minimum side 8 px)")]
    DegenerateImage { width: u32, height: u32 },

    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid synthetic dataset spec: {0}")]
    InvalidSynthetic(String),

    #[error("unknown backbone {0:?} (expected conv4, conv6, resnet10, resnet18 or resnet34)")]
    UnknownBackbone(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("support features cannot be grouped: {0}")]
    Grouping(String),

    #[error("cosine similarity is undefined for an all-zero feature map")]
    ZeroVector,

    #[error("training diverged: non-finite loss at epoch {epoch}, episode {episode}")]
    Divergence { epoch: usize, episode: usize },

    #[error("confidence interval needs at least 2 tasks, got {0}")]
    InsufficientTasks(usize),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("invalid configuration key {key:?}: {message}")]
    Config { key: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
