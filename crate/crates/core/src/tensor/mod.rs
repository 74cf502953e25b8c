//! Dense `f64` tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod value;

pub use gradcheck::{
    check_against_numeric, grad_check, grad_check_params, relative_error, GradCheckReport,
    ABS_FLOOR,
};
pub use kernels::log_sum_exp;
pub use params::{GradBuffer, ParamBinder, ParamId, ParamStore, MANIFEST_VERSION};
pub use tape::{OpKind, Tape, Var};
pub use value::Tensor;

#[cfg(test)]
mod tests;
