//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("custom gradient for input {index} returned length {got}, expected {expected}")]
    CustomGradShape {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("invalid quantizer spec: {0}")]
    InvalidSpec(String),
    #[error("operation requires a non-empty tensor")]
    EmptyTensor,
    #[error("cosine similarity of a zero-norm vector is undefined")]
    ZeroNorm,
    #[error("clipping-threshold gradient is defined only for the apot kind, got {0}")]
    AlphaGradKind(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("cannot select {m} items from {n} candidates")]
    SelectionCount { m: usize, n: usize },
    #[error("trajectory segment [{start}, {end}] outside recorded range 0..{len}")]
    EpochOutOfRange { start: usize, end: usize, len: usize },
    #[error("loss became NaN at iteration {iter} (alpha={alpha}); recent losses: {tail:?}")]
    NanLoss {
        iter: usize,
        alpha: f64,
        tail: Vec<f64>,
    },
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("payload truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("codebook index {index} out of range for {levels} levels")]
    IndexOutOfRange { index: usize, levels: usize },
    #[error("sample {sample}, element {element}: value {value} is not on the codebook (residual {residual:e})")]
    OffCodebook {
        sample: usize,
        element: usize,
        value: f64,
        residual: f64,
    },
    #[error("a pass-through dataset has no codebook to pack against")]
    PassthroughPack,
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("unknown architecture {0:?}")]
    UnknownArch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
