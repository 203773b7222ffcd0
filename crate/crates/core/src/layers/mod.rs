//! Forward and backward kernels for every layer type in the network.

mod activation;
mod batchnorm;
mod conv;
mod crop;
mod loss;
mod pool;
mod upsample;

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::{
    batchnorm_apply, batchnorm_backward, batchnorm_backward_in, batchnorm_forward, BatchNormSettings,
    BatchNormState, BatchStats, DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, ConvParams};
pub use crop::{crop_center, uncrop_backward};
pub use loss::{cross_entropy_loss, softmax_backward, softmax_per_pixel};
pub use pool::{
    maxpool2d, maxpool2d_backward, maxunpool2d, maxunpool2d_backward, pooled_shape, SwitchMap,
    POOL_WINDOW,
};
pub use upsample::bilinear_upsample_kernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Gradients produced by a layer's backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T: Scalar = f32> {
    pub d_input: Tensor<T>,
    /// Flat gradients in the layer's parameter order (weights then bias, or
    /// gamma then beta); empty for parameter-free layers.
    pub d_params: Vec<Vec<T>>,
}
