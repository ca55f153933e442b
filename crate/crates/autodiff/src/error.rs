use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: [usize; 2], len: usize },
    #[error("only rank 1 and rank 2 shapes are supported, got {0:?}")]
    Rank(Vec<usize>),
    #[error("invalid axis {0}, expected 0 or 1")]
    Axis(usize),
    #[error("{op}: reduction over an empty axis of shape {shape:?}")]
    EmptyAxis { op: &'static str, shape: [usize; 2] },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar([usize; 2]),
    #[error("slice rows {rows:?} cols {cols:?} out of bounds for shape {shape:?}")]
    Slice {
        shape: [usize; 2],
        rows: (usize, usize),
        cols: (usize, usize),
    },
    #[error("index {index} out of bounds for {len} rows")]
    Index { index: usize, len: usize },
    #[error("{op}: empty operand list")]
    NoOperands { op: &'static str },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
