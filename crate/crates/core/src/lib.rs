//! Convolutional networks trained discriminatively or as tilted generative
//! models, with Hamiltonian Monte Carlo for visualizing what a unit encodes.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hmc;
pub mod image;
pub mod loss;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use loss::{LossGrad, Matrix, ScoreMatrix};
pub use net::{Network, NetworkConfig, ParamGrads, ParamStore};
pub use tensor::Tensor;
