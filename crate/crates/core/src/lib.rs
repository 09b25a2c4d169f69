//! Functional half of the NeuraChip model.
//!
//! * [`sparse`]: CSR/CSC storage, Matrix Market ingestion, the reference
//!   SpGEMM, partial-product bloat accounting and ReLU.
//! * [`isa`]: the `MMH` multiply and `HACC` accumulate instructions and their
//!   binary stream format.
//! * [`compiler`]: lowers SpGEMM and GCN layers to a memory image plus an
//!   `MMH` stream following the 4-row tiled Gustavson schedule.
//! * [`mapping`]: TAG → accumulator mapping policies, including dynamically
//!   reseeded hashing.
//!
//! Matrix code is generic over [`Scalar`]; the instruction set is fixed to
//! 64-bit reals, so the compiler and simulator work on [`SparseMatrixF64`].

pub mod compiler;
pub mod isa;
pub mod mapping;
pub mod rng;
pub mod scalar;
pub mod sparse;

pub use scalar::Scalar;
pub use sparse::{Layout, SparseMatrix};

/// Storage used by the compiler, the simulator and the ISA payloads.
pub type SparseMatrixF64 = SparseMatrix<f64>;
/// Single precision storage, useful for host-side analysis of large graphs.
pub type SparseMatrixF32 = SparseMatrix<f32>;
/// Exact integer storage; products are exact as long as they do not overflow.
pub type SparseMatrixI64 = SparseMatrix<i64>;
