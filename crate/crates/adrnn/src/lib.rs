//! Adaptive-computation convolutional recurrent networks (AdRNNs):
//! ConvGRU, LocRNN and a weight-tied residual baseline combined with a
//! learnable halting mechanism, plus procedural Mazes and PathFinder
//! task generators, a small training loop and evaluation tooling.

pub mod cells;
pub mod data;
pub mod error;
pub mod eval;
pub mod halting;
pub mod model;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{AdrnnError, Result};
pub use tape::{Scalar, Tape, TensorRef};
