//! Network construction, the parameter registry, forward/backward
//! orchestration and weight files.

pub mod config;
pub mod model;
pub mod weights;

pub use config::{
    build_deconvnet, build_deconvnet_for_input, build_fcn_baseline, build_fcn_baseline_for_input, LayerKind,
    LayerSpec, Link, NetworkConfig, ShapeFlow, WeightInit, ENCODER_STRIDE, FULL_INPUT_SIDE, VOC_CLASSES,
};
pub use model::{Backprop, ForwardTrace, Gradients, LayerParams, Model, ParamSlot, INIT_STDDEV};
pub use weights::{load_weights, load_weights_into, save_container, save_weights, Container, Manifest};
