//! Deterministic numeric foundation: row-major `f32` matrices, bit-exact
//! BF16 conversion, and seeded pseudo-random generation.
//!
//! Everything here is a pure function or an immutable value; all of the
//! higher layers lean on the determinism guarantees documented on each item.

mod bf16;
mod matrix;
mod rng;

pub use bf16::Bf16;
pub use matrix::{matmul, matmul_col_range, Matrix};
pub use rng::{gaussian_matrix, Rng};
