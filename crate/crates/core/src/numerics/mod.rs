//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_fn, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Elementwise, Tape, Var, PROB_CLAMP};
pub use tensor::{ParamId, ParamStore, Tensor};

pub(crate) use kernels::sigmoid;
pub(crate) use tape::bce_value;

/// Default finite-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Default relative tolerance for gradient checks.
pub const FD_TOL: f64 = 1e-4;
