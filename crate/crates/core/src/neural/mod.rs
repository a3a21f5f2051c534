//! Small dense-network toolkit: affine layers with ReLU/sigmoid, exact
//! backpropagation, MSE and Adam.

pub mod adam;
pub mod checkpoint;
pub mod layer;
pub mod linalg;
pub mod loss;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use layer::{sigmoid, Activation, DenseLayer, ForwardCache, GradientBundle, LayerGrad, Mlp};
pub use linalg::Matrix;
pub use loss::{mse, mse_grad};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("non-finite gradient in tensor {tensor} at index {index}")]
    NonFiniteGradient { tensor: usize, index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
