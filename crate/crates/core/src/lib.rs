//! Adversarially robust probabilistic trajectory prediction.

pub mod attacks;
pub mod augmentation;
pub mod autodiff;
pub mod kinematics;
pub mod nn;
pub mod planner;
pub mod predictor;
pub mod probe;
pub mod scalar;
pub mod scene;
pub mod seed;
pub mod training;

pub use scalar::Scalar;

/// Tensor of 64-bit reals, the precision every model in this crate uses.
pub type Tensor = autodiff::Tensor<f64>;
/// Computation graph over 64-bit reals.
pub type Graph = autodiff::Graph<f64>;
pub use autodiff::Var;
