//! Constant fan-in sparse training at desk scale.
//!
//! The crate provides, in rough dependency order:
//!
//! * [`condensed`] — two-plane storage for constant fan-in matrices and the
//!   gather-multiply-accumulate kernel, with a dense masked oracle and a
//!   flat binary serialization.
//! * [`variance`] — closed-form output-norm variance for three sparsity
//!   types and a Monte Carlo validator.
//! * [`topology`] — RigL and SRigL (constant fan-in + neuron ablation) mask
//!   updates, the ERK per-layer sparsity allocator and the cosine drop
//!   schedule.
//! * [`train`] — a small masked MLP trainer driving the topology updates.
//! * [`flops`] — inference and training FLOPs accounting over an
//!   architecture description.
//!
//! Numeric kernels are generic over [`scalar::Scalar`] (`f32`/`f64`);
//! concrete aliases are exported at the crate root.

pub mod condensed;
pub mod dense;
pub mod flops;
pub mod scalar;
pub mod topology;
pub mod train;
pub mod variance;

pub use condensed::{CondensedError, CondensedMatrix, DenseMaskedMatrix};
pub use dense::DenseMatrix;
pub use scalar::Scalar;

/// Condensed matrix in the on-disk precision.
pub type CondensedF32 = CondensedMatrix<f32>;
/// Condensed matrix in training precision.
pub type CondensedF64 = CondensedMatrix<f64>;
pub type DenseMaskedF32 = DenseMaskedMatrix<f32>;
pub type DenseMaskedF64 = DenseMaskedMatrix<f64>;
pub type DenseF32 = DenseMatrix<f32>;
pub type DenseF64 = DenseMatrix<f64>;
