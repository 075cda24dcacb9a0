//! Minimal differentiable 3D U-Net with analytic gradients.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference checks.

use thiserror::Error;

pub mod adam;
pub mod loss;
pub mod mixup;
pub mod ops;
pub mod tensor;
pub mod unet;
pub mod weights;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{dice_loss, one_hot, DICE_EPS};
pub use mixup::{mixup, sample_lambda};
pub use tensor::{Scalar, Tensor};
pub use unet::{
    backward, forward_with_cache, tensor_names, tensor_shapes, unet_forward, Conv, ConvBlock, Dropout, ForwardCache,
    Mode, UNetConfig, UNetParams, UpBlock,
};
pub use weights::{decode_weights, encode_weights, read_weights, write_weights};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("spatial dims {0:?} must be even")]
    OddDims([usize; 3]),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("weights file: {0}")]
    Weights(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, NnError::NonFinite(_))
    }
}
