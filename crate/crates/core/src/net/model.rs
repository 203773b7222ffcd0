use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LayerKind, Link, NetworkConfig, ShapeFlow, WeightInit};
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_apply, batchnorm_backward_in, bilinear_upsample_kernel, conv2d_backward,
    conv2d_forward, crop_center, deconv2d_backward, deconv2d_forward, maxpool2d,
    maxpool2d_backward, maxunpool2d, maxunpool2d_backward, relu_backward, relu_forward,
    softmax_backward, softmax_per_pixel, uncrop_backward, BatchNormSettings, BatchNormState,
    BatchStats, ConvParams, Mode, SwitchMap,
};
use crate::tensor::{Scalar, Shape4, Tensor};

/// Standard deviation of the zero-mean Gaussian weight initialization.
pub const INIT_STDDEV: f64 = 0.01;

/// Named flat gradients, one entry per learnable parameter.
pub type Gradients<T> = BTreeMap<String, Vec<T>>;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T: Scalar> {
    None,
    Conv(ConvParams<T>),
    BatchNorm(BatchNormState<T>),
}

/// Per-layer activations of one forward pass, kept for backward and for
/// activation dumps.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Scalar = f32> {
    pub mode: Mode,
    pub input: Tensor<T>,
    /// Output of every layer, in layer order.
    pub outputs: Vec<Tensor<T>>,
    /// Switches of pooling layers; `None` for every other layer.
    pub switches: Vec<Option<SwitchMap>>,
    version: u64,
}

impl<T: Scalar> ForwardTrace<T> {
    fn layer_input(&self, i: usize) -> &Tensor<T> {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }
}

/// Gradient of a backward pass.
#[derive(Debug, Clone)]
pub struct Backprop<T: Scalar = f32> {
    pub grads: Gradients<T>,
    pub d_input: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: NetworkConfig,
    flow: ShapeFlow,
    layers: Vec<LayerParams<T>>,
    version: u64,
}

/// Mutable view of one learnable parameter.
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub data: &'a mut [T],
}

fn layer_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<T: Scalar> Model<T> {
    /// Builds a model with fresh weights: zero-mean Gaussian (stddev 0.01)
    /// weights, zero biases, unit batchnorm scale, and fixed bilinear kernels
    /// where the config asks for them.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        Self::with_settings(config, seed, BatchNormSettings::default())
    }

    pub fn with_settings(config: NetworkConfig, seed: u64, bn: BatchNormSettings) -> Result<Self> {
        Self::build(config, Some(seed), bn)
    }

    /// Zero-weight model of the right shapes.
    pub(crate) fn skeleton(config: NetworkConfig) -> Result<Self> {
        Self::build(config, None, BatchNormSettings::default())
    }

    fn build(config: NetworkConfig, seed: Option<u64>, bn: BatchNormSettings) -> Result<Self> {
        let flow = config.shape_flow()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, spec) in config.layers.iter().enumerate() {
            let cin = flow.in_channels[i];
            let params = match spec.kind {
                LayerKind::Conv | LayerKind::Deconv => {
                    let (k, s, p, cout) = spec.kernel_geometry()?;
                    let conv = spec.kind == LayerKind::Conv;
                    // Conv weights are (out, in, k, k); deconv weights (in, out, k, k).
                    let (a, b) = if conv { (cout, cin) } else { (cin, cout) };
                    match spec.init {
                        WeightInit::Gaussian => {
                            let shape = Shape4::new(a, b, k, k)?;
                            let weights = match seed {
                                Some(seed) => {
                                    let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, i));
                                    Tensor::gaussian_with(shape, INIT_STDDEV, &mut rng)?
                                }
                                None => Tensor::zeros(shape)?,
                            };
                            LayerParams::Conv(ConvParams::new(weights, vec![T::zero(); cout], s, p)?)
                        }
                        WeightInit::Bilinear => {
                            if conv || cin != cout || k != 2 * s - s % 2 || p != s / 2 {
                                return Err(Error::Config(format!(
                                    "layer {} cannot carry a bilinear kernel",
                                    spec.name
                                )));
                            }
                            LayerParams::Conv(bilinear_upsample_kernel(s, cout)?)
                        }
                    }
                }
                LayerKind::Batchnorm => LayerParams::BatchNorm(BatchNormState::new(cin, bn)?),
                _ => LayerParams::None,
            };
            layers.push(params);
        }
        Ok(Model {
            config,
            flow,
            layers,
            version: 0,
        })
    }

    /// Assembles a model from explicit per-layer parameters, checking every
    /// shape against the config.
    pub fn from_parts(config: NetworkConfig, layers: Vec<LayerParams<T>>) -> Result<Self> {
        let template = Model::<T>::skeleton(config)?;
        if layers.len() != template.layers.len() {
            return Err(Error::Config(format!(
                "{} parameter blocks for {} layers",
                layers.len(),
                template.layers.len()
            )));
        }
        for (i, (got, want)) in layers.iter().zip(&template.layers).enumerate() {
            let name = &template.config.layers[i].name;
            let ok = match (got, want) {
                (LayerParams::None, LayerParams::None) => true,
                (LayerParams::Conv(g), LayerParams::Conv(w)) => {
                    g.weights.shape() == w.weights.shape()
                        && g.bias.len() == w.bias.len()
                        && g.stride == w.stride
                        && g.pad == w.pad
                }
                (LayerParams::BatchNorm(g), LayerParams::BatchNorm(w)) => {
                    g.channels() == w.channels()
                        && g.beta.len() == w.beta.len()
                        && g.running_mean.len() == w.running_mean.len()
                        && g.running_var.len() == w.running_var.len()
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Config(format!("parameters of layer {name} do not match the config")));
            }
        }
        Ok(Model {
            layers,
            ..template
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn shape_flow(&self) -> &ShapeFlow {
        &self.flow
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.config.layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Square input side expected by the network.
    pub fn input_side(&self) -> usize {
        self.config.input_shape.h
    }

    /// Incremented whenever parameters are handed out mutably.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Weights, biases and batchnorm scale/shift, frozen layers included.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerParams::None => 0,
                LayerParams::Conv(p) => p.param_count(),
                LayerParams::BatchNorm(b) => b.gamma.len() + b.beta.len(),
            })
            .sum()
    }

    fn is_frozen(&self, i: usize) -> bool {
        self.config.layers[i].frozen
    }

    /// Learnable parameters in layer order.
    pub fn parameters(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, (spec, params)) in self.config.layers.iter().zip(&self.layers).enumerate() {
            if self.is_frozen(i) {
                continue;
            }
            match params {
                LayerParams::Conv(p) => {
                    out.push((format!("{}.weight", spec.name), p.weights.data()));
                    out.push((format!("{}.bias", spec.name), p.bias.as_slice()));
                }
                LayerParams::BatchNorm(b) => {
                    out.push((format!("{}.gamma", spec.name), b.gamma.as_slice()));
                    out.push((format!("{}.beta", spec.name), b.beta.as_slice()));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Mutable learnable parameters. Invalidates outstanding traces.
    pub fn parameters_mut(&mut self) -> Vec<ParamSlot<'_, T>> {
        self.version += 1;
        let mut out = Vec::new();
        for (spec, params) in self.config.layers.iter().zip(self.layers.iter_mut()) {
            if spec.frozen {
                continue;
            }
            match params {
                LayerParams::Conv(p) => {
                    out.push(ParamSlot {
                        name: format!("{}.weight", spec.name),
                        data: p.weights.data_mut(),
                    });
                    out.push(ParamSlot {
                        name: format!("{}.bias", spec.name),
                        data: p.bias.as_mut_slice(),
                    });
                }
                LayerParams::BatchNorm(b) => {
                    out.push(ParamSlot {
                        name: format!("{}.gamma", spec.name),
                        data: b.gamma.as_mut_slice(),
                    });
                    out.push(ParamSlot {
                        name: format!("{}.beta", spec.name),
                        data: b.beta.as_mut_slice(),
                    });
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::None => LayerParams::None,
                LayerParams::Conv(p) => LayerParams::Conv(ConvParams {
                    weights: p.weights.cast(),
                    bias: p.bias.iter().map(|v| U::of(v.as_f64())).collect(),
                    stride: p.stride,
                    pad: p.pad,
                }),
                LayerParams::BatchNorm(b) => {
                    let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.as_f64())).collect();
                    LayerParams::BatchNorm(BatchNormState {
                        gamma: c(&b.gamma),
                        beta: c(&b.beta),
                        running_mean: c(&b.running_mean),
                        running_var: c(&b.running_var),
                        epsilon: b.epsilon,
                        momentum: b.momentum,
                        mode: b.mode,
                        stats_recorded: b.stats_recorded,
                    })
                }
            })
            .collect();
        Model {
            config: self.config.clone(),
            flow: self.flow.clone(),
            layers,
            version: 0,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let want = self.flow.input;
        if (s.c, s.h, s.w) != (want.c, want.h, want.w) {
            return Err(Error::shape(
                "forward",
                format!("input {s} does not match network input {want}"),
            ));
        }
        Ok(())
    }

    fn run(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<ForwardTrace<T>>, Vec<(usize, BatchStats)>)> {
        self.check_input(x)?;
        let n = x.shape().n;
        let count = self.layers.len();
        let mut switches: Vec<Option<SwitchMap>> = vec![None; count];
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(if keep { count } else { 0 });
        let mut stats = Vec::new();
        let mut current = x.clone();
        for i in 0..count {
            let spec = &self.config.layers[i];
            let next = match (&self.layers[i], spec.kind) {
                (LayerParams::Conv(p), LayerKind::Conv) => conv2d_forward(&current, p)?,
                (LayerParams::Conv(p), LayerKind::Deconv) => deconv2d_forward(&current, p)?,
                (LayerParams::BatchNorm(b), LayerKind::Batchnorm) => {
                    let (out, s) = batchnorm_apply(&current, b, mode)
                        .map_err(|e| Error::State(format!("layer {}: {e}", spec.name)))?;
                    if let Some(s) = s {
                        stats.push((i, s));
                    }
                    out
                }
                (_, LayerKind::Maxpool) => {
                    let (out, s) = maxpool2d(&current)?;
                    switches[i] = Some(s);
                    out
                }
                (_, LayerKind::Maxunpool) => {
                    let Link::Pool(j) = self.flow.links[i] else {
                        return Err(Error::Config(format!("layer {} has no switch pairing", spec.name)));
                    };
                    let s = switches[j].as_ref().ok_or_else(|| {
                        Error::Config(format!("switches of {} missing for {}", self.config.layers[j].name, spec.name))
                    })?;
                    maxunpool2d(&current, s, s.input_shape)?
                }
                (_, LayerKind::Relu) => relu_forward(&current),
                (_, LayerKind::Softmax) => softmax_per_pixel(&current)?,
                (_, LayerKind::Crop) => {
                    let Link::CropTo(target) = self.flow.links[i] else {
                        return Err(Error::Config(format!("crop layer {} has no target", spec.name)));
                    };
                    let t = match target {
                        None => self.flow.input,
                        Some(j) => self.flow.outputs[j],
                    };
                    crop_center(&current, Shape4::new(n, current.shape().c, t.h, t.w)?)?
                }
                _ => {
                    return Err(Error::Config(format!(
                        "layer {} has parameters inconsistent with kind {}",
                        spec.name, spec.kind
                    )))
                }
            };
            if keep {
                outputs.push(std::mem::replace(&mut current, next));
            } else {
                current = next;
            }
        }
        let trace = keep.then(|| {
            outputs.remove(0);
            outputs.push(current.clone());
            ForwardTrace {
                mode,
                input: x.clone(),
                outputs,
                switches,
                version: self.version,
            }
        });
        Ok((current, trace, stats))
    }

    /// Runs the network. Train mode normalizes with batch statistics and
    /// folds them into the running averages.
    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        trace: bool,
    ) -> Result<(Tensor<T>, Option<ForwardTrace<T>>)> {
        let (out, trace, stats) = self.run(x, mode, trace)?;
        for (i, s) in stats {
            if let LayerParams::BatchNorm(b) = &mut self.layers[i] {
                b.record(&s);
                b.mode = mode;
            }
        }
        Ok((out, trace))
    }

    /// Inference-mode forward on a shared model.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, Mode::Infer, false)?.0)
    }

    pub fn infer_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let (out, trace, _) = self.run(x, Mode::Infer, true)?;
        Ok((out, trace.expect("trace requested")))
    }

    /// Backpropagates `d_output` through a trace of this model's current
    /// parameters. Gradients of frozen layers are withheld.
    pub fn backward(&self, trace: &ForwardTrace<T>, d_output: &Tensor<T>) -> Result<Backprop<T>> {
        if trace.version != self.version || trace.outputs.len() != self.layers.len() {
            return Err(Error::State("trace is stale or belongs to another model".into()));
        }
        let last = trace.outputs.last().unwrap();
        if d_output.shape() != last.shape() {
            return Err(Error::shape(
                "backward",
                format!("output gradient {} vs output {}", d_output.shape(), last.shape()),
            ));
        }
        let mut grads = Gradients::new();
        let mut d = d_output.clone();
        for i in (0..self.layers.len()).rev() {
            let spec = &self.config.layers[i];
            let input = trace.layer_input(i);
            let frozen = spec.frozen;
            d = match (&self.layers[i], spec.kind) {
                (LayerParams::Conv(p), LayerKind::Conv | LayerKind::Deconv) => {
                    let g = if spec.kind == LayerKind::Conv {
                        conv2d_backward(input, p, &d)?
                    } else {
                        deconv2d_backward(input, p, &d)?
                    };
                    let mut it = g.d_params.into_iter();
                    if !frozen {
                        grads.insert(format!("{}.weight", spec.name), it.next().unwrap());
                        grads.insert(format!("{}.bias", spec.name), it.next().unwrap());
                    }
                    g.d_input
                }
                (LayerParams::BatchNorm(b), LayerKind::Batchnorm) => {
                    let g = batchnorm_backward_in(input, b, trace.mode, &d)?;
                    let mut it = g.d_params.into_iter();
                    if !frozen {
                        grads.insert(format!("{}.gamma", spec.name), it.next().unwrap());
                        grads.insert(format!("{}.beta", spec.name), it.next().unwrap());
                    }
                    g.d_input
                }
                (_, LayerKind::Maxpool) => {
                    let s = trace.switches[i]
                        .as_ref()
                        .ok_or_else(|| Error::State(format!("trace lacks switches of {}", spec.name)))?;
                    maxpool2d_backward(&d, s)?
                }
                (_, LayerKind::Maxunpool) => {
                    let Link::Pool(j) = self.flow.links[i] else {
                        return Err(Error::Config(format!("layer {} has no switch pairing", spec.name)));
                    };
                    let s = trace.switches[j]
                        .as_ref()
                        .ok_or_else(|| Error::State(format!("trace lacks switches for {}", spec.name)))?;
                    maxunpool2d_backward(&d, s)?
                }
                (_, LayerKind::Relu) => relu_backward(input, &d)?,
                (_, LayerKind::Softmax) => softmax_backward(&trace.outputs[i], &d)?,
                (_, LayerKind::Crop) => uncrop_backward(&d, input.shape())?,
                _ => {
                    return Err(Error::Config(format!(
                        "layer {} has parameters inconsistent with kind {}",
                        spec.name, spec.kind
                    )))
                }
            };
        }
        Ok(Backprop { grads, d_input: d })
    }
}
