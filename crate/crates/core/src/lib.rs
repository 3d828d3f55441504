//! Randomized Tucker and hierarchical Tucker decompositions of dense tensors.

pub mod diagnostics;
pub mod error;
pub mod htucker;
pub mod linalg;
pub mod parallel;
pub mod registry;
pub mod sketch;
pub mod tensor;
pub mod tucker;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{DenseTensor, ModeSet, Shape};
