//! Minimal differentiable compute core: dense matrices, nonlinearities,
//! losses, valid convolutions, SGD, and a finite-difference gradient checker.
//!
//! Everything is 64-bit; gradients are hand-derived per operation and
//! composed by explicit backward calls in reverse order. There is no tape.

mod conv;
mod gradcheck;
mod matrix;
mod ops;
mod store;

pub use conv::{conv2d, conv2d_backward, ConvSpec, Tensor3};
pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use matrix::DenseMatrix;
pub use ops::{
    affine, cross_entropy, entropy, logistic, relu, relu_backward, softmax, softmax_backward,
    softmax_cross_entropy_grad, ProbVector, LOG_EPS,
};
pub use store::{sgd_step, sgd_step_momentum, MomentumState, Param, ParamStore};
