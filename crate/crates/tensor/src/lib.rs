//! Dense `f64` arrays with a reverse-mode tape.
//!
//! Single-threaded and deterministic: replaying the same program on the same
//! inputs produces bit-identical values and gradients.

mod array;
mod error;
pub mod gradcheck;
mod ops;
mod tape;

pub use array::{split_axis, topk_of, DArray};
pub use error::{Result, TensorError};
pub use tape::{MacCount, PoolKind, Tape, Var};

/// Logistic function, stable for large `|v|`.
pub fn sigmoid(v: f64) -> f64 {
    ops::sigmoid(v)
}
