//! Dense `f64` matrices and the forward/backward contract shared by every
//! differentiable layer.

mod gradcheck;
mod matrix;

pub use gradcheck::{grad_check, Differentiable, GradCheckReport, Gradients};
pub(crate) use matrix::softmax_in_place;
pub use matrix::{dot, softmax_rows, solve, Matrix, Shape};
