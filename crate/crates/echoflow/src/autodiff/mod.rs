//! Dense f64 reverse-mode automatic differentiation.
//!
//! [`kernels`] holds the raw numeric routines, [`tape`] records ops and runs
//! backward, and [`gradcheck`] verifies analytic gradients against central
//! finite differences. Convolutions fan work out over channel planes ([`par`])
//! with every element written by exactly one worker in serial order, so all
//! results are bitwise reproducible regardless of thread count.

pub mod gradcheck;
pub mod kernels;
pub mod par;
pub mod tape;

pub use gradcheck::{check_all_ops, grad_check, GradCheckOpts, GradCheckReport, OpCheck};
pub use kernels::SamplePad;
pub use par::{set_thread_count, thread_count};
pub use tape::{AutodiffError, Tape, TensorId, UpsampleMode};
