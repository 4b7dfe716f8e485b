//! Bit-packed ±1 and tri-state matrices, the binary GEMM kernels built on
//! them, and the BOPs/FLOPs accountant.

mod gemm;
mod matrix;
mod ops_count;

pub use gemm::{masked_gemm, masked_gemm_nt, xnor_popcount_gemm, xnor_popcount_gemm_nt};
pub use matrix::{BitMatrix, TriStateMatrix, WORD_BITS};
pub use ops_count::{count_ops, BlockPart, ModelShape, OpTally, OpsMode, OpsReport, PartOps};
