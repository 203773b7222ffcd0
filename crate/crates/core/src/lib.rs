//! Encoder-decoder semantic segmentation with learned deconvolution and
//! switch-driven unpooling.

pub mod data;
pub mod error;
pub mod infer;
pub mod layers;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::{LabelMask, IGNORE_LABEL};
pub use tensor::{Scalar, Shape4, Tensor};
pub use data::{BoxGeometry, PixelMean, Sample, TrainingExample};
pub use infer::{AggregationMode, SegmentOptions, SegmentationResult};
pub use layers::Mode;
pub use metrics::{ConfusionCounts, MetricsReport};
pub use net::{Model, NetworkConfig};
pub use train::{OptimConfig, TrainState};
