//! Binarized vision transformer built around group superposition binarization
//! (GSB) of the attention matrix and the value matrix.
//!
//! The crate is organised bottom-up:
//!
//! * [`bitops`] packs ±1 / tri-state matrices and runs the xnor-popcount and
//!   skip-zero kernels, and counts BOPs/FLOPs for a transformer block.
//! * [`binarize`] holds the weight/activation binarizers, their
//!   straight-through gradients and the binarized linear layer.
//! * [`gsb_attention`], [`gsb_value`] and [`baseline_attn`] binarize the
//!   attention matrix and `V`.
//! * [`model`] assembles a small ViT with hand-written backward passes and the
//!   two-stage training loop.
//! * [`oracle`] contains independent reference evaluators used by tests and
//!   the `grad-check` / `init-check` commands.
//! * [`harness`] is configuration, datasets and the command implementations.

pub mod baseline_attn;
pub mod binarize;
pub mod bitops;
pub mod gsb_attention;
pub mod gsb_value;
pub mod harness;
pub mod model;
pub mod oracle;

mod error;
mod param;
mod tensor;

pub use error::{Error, Result};
pub use param::{Param, Parameters};
pub use tensor::{Tensor3, Tensor3View};
