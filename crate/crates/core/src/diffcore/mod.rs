//! Reverse-mode differentiation over dense rank-≤2 arrays.
//!
//! A [`Tape`] records each operation as it is evaluated; [`Tape::backward`]
//! walks the record in reverse and leaves gradients on the trainable leaves.
//! One tape is built per forward pass and dropped afterwards.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{check_gradients, GradCheckEntry, GradCheckReport, Selection};
pub use tape::{sigmoid, Tape, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: argument {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range 0..{bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: (usize, usize) },
    #[error("cannot build a {rows}x{cols} array from {len} values")]
    Construction { rows: usize, cols: usize, len: usize },
}

#[cfg(test)]
mod tests;
