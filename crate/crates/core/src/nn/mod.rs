//! Small sequential neural-network engine: dense and convolutional layers,
//! batchnorm, dropout, reverse-mode gradients, Adam and Xavier init.

mod adam;
mod functional;
mod layer;
mod network;
mod tensor;

pub use adam::AdamState;
pub use functional::{bce_loss, bce_with_logit, log_softmax, sigmoid, softmax};
pub use layer::{compact_conv_stack, infer_shapes, large_conv_stack, small_conv_stack, Extractor, LayerSpec};
pub use network::{Cache, Gradients, LayerGrads, LayerParams, Network};
pub use tensor::{matmul, Real, Tensor};
