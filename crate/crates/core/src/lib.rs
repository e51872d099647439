//! Invariant and variant latent recovery for continual learning with dual
//! volume-preserving flows.

// Validation uses `!(x > 0.0)` so that NaN is rejected along with
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod classify;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow;
pub mod numerics;
pub mod objectives;
pub mod synthdata;
pub mod theory;
pub mod trainer;

pub use error::{IconError, Result};
