//! From-scratch differentiable building blocks and the segmentation network.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod network;
mod param;
mod scalar;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use layers::{
    conv2d_backward, conv2d_forward, relu, relu_backward, softmax_channels, softmax_channels_backward,
    upsample_nearest2x, upsample_nearest2x_backward, BatchNorm2d, Conv2d, ConvShape, Mode,
};
pub use network::{ConvBnRelu, Network, NetworkConfig, ResidualBlock};
pub use param::{Moments, Param};
pub use scalar::Scalar;
pub use tensor::Tensor;
