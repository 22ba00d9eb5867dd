//! Dense-supervision detection training: box geometry, label assignment,
//! losses, group masks, a small detector, data, evaluation and training.

pub mod assign;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod masks;
pub mod model;
pub mod train;

pub use error::{Error, Result};
