//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use params::{Graph, ParamBuilder, ParamId, ParamStore};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{dot, norm};
