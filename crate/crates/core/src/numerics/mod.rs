//! Dense tensors, reverse-mode differentiation and a finite-difference
//! gradient oracle.

pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod ops;
mod param;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use ops::{AttentionMask, LAYER_NORM_EPS};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{s, Scalar};
pub use tape::{Gradients, Graph, Var};
pub use tensor::Tensor;
