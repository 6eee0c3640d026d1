use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed container: {0}")]
    Container(String),

    #[error("no tensors")]
    NoTensors,

    #[error("out-of-bounds tensor `{name}`: range {begin}..{end} exceeds data block of {data_len} bytes")]
    OutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        data_len: u64,
    },

    #[error("overlapping tensors `{first}` and `{second}`")]
    Overlap { first: String, second: String },

    #[error("unsupported dtype `{0}` (expected F32 or F64)")]
    UnsupportedDtype(String),

    #[error("non-finite element in tensor `{name}` at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("empty weight sequence")]
    EmptyWeights,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient weights for {segments} segments: have {have}, need at least {need}")]
    InsufficientWeights {
        segments: usize,
        have: usize,
        need: usize,
    },

    #[error("degenerate segment: standard deviation is zero")]
    DegenerateSegment,

    #[error("degenerate segment {index}: standard deviation is zero")]
    DegenerateSegmentAt { index: usize },

    #[error("structure features unavailable: no convolution kernels")]
    NoConvLayers,

    #[error("map divergence at step {step}")]
    MapDivergence { step: usize },

    #[error("map divergence in block {block} at step {step}")]
    BlockDivergence { block: usize, step: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("duplicate model_id `{0}`")]
    DuplicateModel(String),

    #[error("corrupt registry line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },

    #[error("invalid hash record: {0}")]
    HashFormat(String),

    #[error("empty tamper plan")]
    EmptyTamperPlan,

    #[error("invalid architecture spec: {0}")]
    InvalidSpec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
