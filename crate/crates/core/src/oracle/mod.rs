//! Independent reference implementations for tests and the check commands:
//! a float-only model forward, a brute-force least-squares solver,
//! standalone evaluators of the GSB gradient formulas, and a linear probe.
//!
//! None of this shares code with the production paths it checks.

pub mod dense;
pub mod grads;
pub mod ls;
pub mod probe;

pub use dense::dense_reference_forward;
pub use ls::{attention_problem, brute_force_ls, value_problem, LsProblem, LsSolution};
pub use probe::linear_probe_accuracy;
