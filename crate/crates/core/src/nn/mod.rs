//! Minimal deterministic CPU neural-network engine: convolution, max-pool,
//! dense, ReLU, dropout and flatten layers trained with softmax
//! cross-entropy and Adam.

mod adam;
mod arch;
pub mod gradcheck;
mod network;
mod ops;
mod params;
mod tensor;

pub use adam::AdamState;
pub use arch::{Architecture, Layer, Shape};
pub use network::{forward, loss_and_grad, predict_proba, softmax_rows, train_step};
pub use params::{init_model, LayerParams, ModelParams};
pub use tensor::Tensor;
