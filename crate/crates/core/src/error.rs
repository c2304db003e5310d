use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("gather: index {index} at ({row}, {slot}) out of range for {len} rows")]
    IndexOutOfBounds {
        row: usize,
        slot: usize,
        index: usize,
        len: usize,
    },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: tape already consumed; run a new forward pass first")]
    StaleTape,

    #[error("backward: node {0} does not belong to this tape")]
    UnknownNode(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient check: function is not deterministic")]
    NonDeterministic,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: line {line}: {kind}")]
    OffParse {
        path: String,
        line: usize,
        kind: OffErrorKind,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("length mismatch: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("label {label} out of range for {classes} classes (sample {sample})")]
    LabelRange {
        sample: usize,
        label: usize,
        classes: usize,
    },

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("dataset does not match model: {0}")]
    DatasetMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

/// Distinct failure kinds of the OFF reader.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OffErrorKind {
    MissingCounts,
    BadNumber(String),
    VertexCount { expected: usize, found: usize },
    FaceCount { expected: usize, found: usize },
    FaceIndex { index: usize, vertices: usize },
    FaceArity(usize),
}

impl std::fmt::Display for OffErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OffErrorKind::MissingCounts => write!(f, "missing vertex/face counts"),
            OffErrorKind::BadNumber(tok) => write!(f, "cannot parse number {tok:?}"),
            OffErrorKind::VertexCount { expected, found } => {
                write!(f, "expected {expected} vertices, found {found}")
            }
            OffErrorKind::FaceCount { expected, found } => {
                write!(f, "expected {expected} faces, found {found}")
            }
            OffErrorKind::FaceIndex { index, vertices } => {
                write!(f, "face index {index} out of range for {vertices} vertices")
            }
            OffErrorKind::FaceArity(n) => write!(f, "face with {n} vertices (need at least 3)"),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
