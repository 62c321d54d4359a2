//! Just enough reverse-mode differentiation for DESC: a parameter store
//! with Adam state, a row-batched tape, and a finite-difference checker.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use params::{Adam, Grads, NamedTensor, Param, ParamId, ParamStore, StoreSnapshot, Tensor};
pub use tape::{softmax, softmax_rows, Activation, Tape, Var};
