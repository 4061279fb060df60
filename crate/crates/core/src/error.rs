use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric argument is outside its documented domain.
    #[error("parameter out of range: {0}")]
    ParamRange(String),

    /// `backward` was called on a graph that has already been consumed.
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    /// `backward` requires a scalar loss tensor.
    #[error("backward requires a scalar tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    /// Tensors from two different graphs were combined.
    #[error("tensors belong to different graphs")]
    GraphMismatch,

    /// All scores identical; the density transform is undefined.
    #[error("degenerate score distribution: all scores identical")]
    DegenerateScores,

    /// Cosine similarity against a zero vector.
    #[error("undefined similarity: zero-norm vector")]
    UndefinedSimilarity,

    /// Table-mode embedder has no entry for the requested text.
    #[error("unknown text: no embedding table entry for {0:?}")]
    UnknownText(String),

    /// Codebook initialisation needs at least one labeled sample.
    #[error("empty labeled set")]
    EmptyLabeledSet,

    /// Weighted F-measure is undefined for an all-zero ground truth.
    #[error("weighted F-measure undefined: ground truth has no foreground")]
    EmptyGroundTruth,

    /// A manifest split holds no records.
    #[error("split {0:?} is empty")]
    EmptySplit(String),

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt image data: {0}")]
    CorruptImage(String),

    #[error("weights file not found: {0}")]
    MissingWeights(PathBuf),

    #[error("invalid weights file: {0}")]
    BadWeights(String),

    #[error("invalid manifest: {0}")]
    BadManifest(String),

    /// Config parse failure; names the offending key when known.
    #[error("config error: {0}")]
    Config(String),

    /// Gradient step produced a non-finite gradient; the step is rejected.
    #[error("non-finite gradient; step rejected")]
    NonFiniteGradient,

    /// A training phase failed; carries the phase name and state snapshot.
    #[error("phase {phase:?} failed at epoch {epoch}, iteration {iteration}: {source}")]
    Phase {
        phase: String,
        epoch: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
