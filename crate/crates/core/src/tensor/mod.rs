//! Dense `f64` arrays with tape-based reverse-mode differentiation.

mod array;
pub mod fd;
mod gemm;
mod ops;
mod tape;

pub use array::NdArray;
pub use tape::{Tape, Var};
