use std::io;

use thiserror::Error;

use crate::code_table::CodeParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid code parameters (n={n}, k={k}): {reason}")]
    InvalidParams {
        n: usize,
        k: usize,
        reason: &'static str,
    },

    #[error("entry count for (n={n}, k={k}) overflows u64")]
    CountOverflow { n: usize, k: usize },

    #[error("code table for {params} has {entries} entries, above the cap of {cap}")]
    TableCapExceeded {
        params: CodeParams,
        entries: u64,
        cap: u64,
    },

    #[error("sub-vector has {nonzeros} non-zeros but {params} allows at most {max}", max = params.k())]
    TooManyNonZeros { params: CodeParams, nonzeros: usize },

    #[error("sub-vector length {got} does not match code length {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("index {index} out of range for a table of {entries} entries")]
    IndexOutOfRange { index: u64, entries: u64 },

    #[error("value {value} at position {position} does not fit in {bits} bits")]
    PackOverflow {
        position: usize,
        value: u64,
        bits: u32,
    },

    #[error("bit stream too short: need {needed} bits, have {available}")]
    ShortStream { needed: u64, available: u64 },

    #[error("{context}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error(
        "dimension {dim} is not divisible by sub-vector length {n} ({orientation} orientation)"
    )]
    NotDivisible {
        dim: usize,
        n: usize,
        orientation: &'static str,
    },

    #[error("layer {layer}: sub-vector {position} violates {params}: {reason}")]
    InvalidSubvector {
        layer: usize,
        position: usize,
        params: CodeParams,
        reason: String,
    },

    #[error("layer {layer}: weight {value} at ({row}, {col}) is not on the quantization grid of step {delta}")]
    OffGrid {
        layer: usize,
        row: usize,
        col: usize,
        value: f64,
        delta: f64,
    },

    #[error("invalid step size {0}: must be finite and positive")]
    InvalidStep(f64),

    #[error("quantizer levels must be odd and at least 3, got {0}")]
    InvalidLevels(u32),

    #[error("no non-zero weights to fit a step size against")]
    AllZero,

    #[error(
        "corrupt payload in layer {layer}: index {index} at position {position} is >= {entries}"
    )]
    CorruptIndex {
        layer: usize,
        position: usize,
        index: u64,
        entries: u64,
    },

    #[error("model format: {0}")]
    Format(String),

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("network: {0}")]
    Network(String),

    #[error("zero-norm weight row {row} cannot be weight-normalized")]
    ZeroNormRow { row: usize },

    #[error("batch normalization needs at least 2 samples in training, got {0}")]
    BatchTooSmall(usize),

    #[error("backward called before a forward pass was cached")]
    NoForwardCache,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
