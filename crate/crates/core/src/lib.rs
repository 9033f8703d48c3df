//! Structured sparse ternary weight coding for fully connected networks.
//!
//! Weights are pruned so that every length-`n` sub-vector keeps at most `k`
//! non-zeros, quantized to `{-Δ, 0, +Δ}`, and stored as indices into a
//! canonical table of all such ternary vectors.

pub mod code_table;
pub mod error;
pub mod grouping;
pub mod kernel;
pub mod pruner;
pub mod quantizer;
pub mod store;
pub mod trainer;

pub use code_table::{CodeParams, CodeTable, SubvectorIndex, TernarySubvector, Trit};
pub use error::{Error, Result};
pub use grouping::Orientation;
