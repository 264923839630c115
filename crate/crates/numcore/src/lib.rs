//! Minimal dense-tensor library with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]s; differentiable computations are recorded on a
//! [`Tape`] (define-by-run, rebuilt every step) and replayed backwards by
//! [`Tape::backward`]. Everything is generic over [`Real`] so the same graph
//! code runs in `f64` for gradient checks and `f32` for training.

mod error;
mod gradcheck;
mod ops;
mod params;
mod real;
mod tape;
mod tensor;

pub use error::NumError;
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Bound, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = NumError> = std::result::Result<T, E>;
