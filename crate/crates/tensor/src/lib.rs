//! Minimal reverse-mode differentiable array engine.
//!
//! Values are 64-bit, row-major and live either outside any graph
//! ([`Tensor`]) or as nodes on a [`Tape`] addressed by [`Var`] handles.
//! Broadcasting is limited to scalar-with-array and trailing-dimension rows.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use error::{Result, TensorError};
pub use tape::{Tape, Var, MAIN_SCOPE};
pub use tensor::Tensor;

/// Logistic function, shared with code that works on plain values.
pub fn sigmoid(x: f64) -> f64 {
    tape::sigmoid(x)
}

/// Inverse of [`sigmoid`] with the argument clamped to `[eps, 1 - eps]`.
pub fn inverse_sigmoid(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}
