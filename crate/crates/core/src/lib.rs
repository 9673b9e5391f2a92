//! Desk-scale lab for distributed-training systems work: exact dense
//! kernels (GEMM, fused norms, the Muon optimizer with its symmetric-Gram
//! Newton-Schulz step), a deterministic simulated multi-rank fabric with
//! ring collectives and an α–β cost model, ZeRO-style optimizer-state
//! sharding with SendRecv parameter reconstruction, distributed
//! checkpointing with offline reshaping, context parallelism for
//! compressed attention, and the analytical performance planners.
//!
//! Everything numeric is generic over [`Scalar`] (`f32`/`f64`); `f64` is
//! the oracle path used by the test suites.

pub mod ckpt;
pub mod cpar;
pub mod error;
pub mod fabric;
pub mod matrix;
pub mod model;
pub mod muon;
pub mod norm;
pub mod plan;
pub mod scalar;
pub mod trainer;
pub mod zero;

pub use error::NumError;
pub use matrix::{finite_diff_grad, gemm, Matrix};
pub use norm::{norm_backward, norm_forward, NormMode, NormSaved};
pub use scalar::Scalar;

/// Concrete aliases for the two supported scalar types.
pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
