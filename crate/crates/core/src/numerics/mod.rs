//! Deterministic dense linear algebra, seeded randomness and statistics.
//!
//! All arithmetic is `f64`. Nothing here allocates threads; every function is
//! pure apart from [`RngStream`], which each consumer owns exclusively.

mod linalg;
mod matrix;
mod rng;
mod stats;

pub use linalg::{
    cholesky_solve, default_step, finite_diff_jacobian, singular_values, spectral_norm,
    symmetric_eigen, Lu,
};
pub use matrix::Matrix;
pub(crate) use matrix::gemm_into;
pub use rng::{stream_id, streams, RngStream};
pub use stats::{mean, pca_project, pearson, rmse, std_error, variance, Pca};

/// Standard-normal log density `log φ(x)`.
#[inline]
pub fn log_std_normal(x: f64) -> f64 {
    -0.5 * x * x - HALF_LOG_2PI
}

/// `½ log 2π`.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;
