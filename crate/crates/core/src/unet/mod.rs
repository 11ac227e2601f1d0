//! Configurable 3D U-Net: layers, network, loss and training.

mod checkpoint;
pub mod layers;
mod model;
mod tensor;
mod train;

pub use checkpoint::Checkpoint;
pub use layers::{inference_normalize, prelu, NormCache};
pub use model::{
    cross_entropy_loss, softmax, ConvBlock, Dropout, ForwardCache, LossType, ModelConfig, ShapeTrace, UNet3d,
    DEFAULT_NORM_EPS, DEFAULT_PRELU_INIT,
};
pub use tensor::Tensor;
pub use train::{image_to_tensor, train, Adam, TrainReport, TrainSchedule};
