//! Tensor core: dense arrays, differentiable operations with exact
//! vector-Jacobian products, and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_against, relative_error, GradCheckReport};
pub use graph::{Graph, Var};
pub use ops::activation::Activation;
pub use ops::attention::{AttentionOptions, AttentionVars, AttentionWeights};
pub use param::{Initializer, ParamGrads, ParamSet, Parameter};
pub use scalar::{Precision, Real};
pub use tensor::Tensor;
