//! Declarative layer stacks: the full deconvolution network, its scaled
//! variants, and the FCN-style baseline.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::pooled_shape;
use crate::tensor::Shape4;

/// Classes of the VOC-style label set: 20 objects plus background.
pub const VOC_CLASSES: usize = 21;
pub const FULL_INPUT_SIDE: usize = 224;
/// Total spatial reduction of the five pooling stages.
pub const ENCODER_STRIDE: usize = 32;

const ENCODER_BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
const FC_CHANNELS: usize = 4096;
/// Output channels of the decoder convolutions, block 5 first.
const DECODER_BLOCKS: [&[usize]; 5] = [
    &[512, 512, 512],
    &[512, 512, 256],
    &[256, 256, 128],
    &[128, 64],
    &[64, 64],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Deconv,
    Maxpool,
    Maxunpool,
    Relu,
    Batchnorm,
    Crop,
    Softmax,
}

impl LayerKind {
    pub fn has_weights(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Deconv)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Conv => "conv",
            LayerKind::Deconv => "deconv",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Maxunpool => "maxunpool",
            LayerKind::Relu => "relu",
            LayerKind::Batchnorm => "batchnorm",
            LayerKind::Crop => "crop",
            LayerKind::Softmax => "softmax",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightInit {
    #[default]
    Gaussian,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
    /// Output channels of conv/deconv layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    /// Pooling layer whose switches an unpooling layer consumes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unpool_pair: Option<String>,
    /// Layer (or `"input"`) whose spatial extent a crop layer matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_to: Option<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub frozen: bool,
    #[serde(default, skip_serializing_if = "is_default_init")]
    pub init: WeightInit,
}

fn is_false(v: &bool) -> bool {
    !*v
}

fn is_default_init(v: &WeightInit) -> bool {
    *v == WeightInit::Gaussian
}

impl LayerSpec {
    fn bare(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            kernel: None,
            stride: None,
            pad: None,
            channels: None,
            unpool_pair: None,
            crop_to: None,
            frozen: false,
            init: WeightInit::Gaussian,
        }
    }

    pub fn conv(name: impl Into<String>, kernel: usize, stride: usize, pad: usize, channels: usize) -> Self {
        LayerSpec {
            kernel: Some(kernel),
            stride: Some(stride),
            pad: Some(pad),
            channels: Some(channels),
            ..Self::bare(name, LayerKind::Conv)
        }
    }

    pub fn deconv(name: impl Into<String>, kernel: usize, stride: usize, pad: usize, channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Deconv,
            ..Self::conv(name, kernel, stride, pad, channels)
        }
    }

    pub fn maxpool(name: impl Into<String>) -> Self {
        LayerSpec {
            kernel: Some(2),
            stride: Some(2),
            pad: Some(0),
            ..Self::bare(name, LayerKind::Maxpool)
        }
    }

    pub fn maxunpool(name: impl Into<String>, pair: impl Into<String>) -> Self {
        LayerSpec {
            kernel: Some(2),
            stride: Some(2),
            pad: Some(0),
            unpool_pair: Some(pair.into()),
            ..Self::bare(name, LayerKind::Maxunpool)
        }
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self::bare(name, LayerKind::Relu)
    }

    pub fn batchnorm(name: impl Into<String>) -> Self {
        Self::bare(name, LayerKind::Batchnorm)
    }

    pub fn crop(name: impl Into<String>, to: impl Into<String>) -> Self {
        LayerSpec {
            crop_to: Some(to.into()),
            ..Self::bare(name, LayerKind::Crop)
        }
    }

    pub fn softmax(name: impl Into<String>) -> Self {
        Self::bare(name, LayerKind::Softmax)
    }

    fn require(&self, field: Option<usize>, what: &str) -> Result<usize> {
        field.ok_or_else(|| Error::Config(format!("layer {} is missing {what}", self.name)))
    }

    pub(crate) fn kernel_geometry(&self) -> Result<(usize, usize, usize, usize)> {
        let k = self.require(self.kernel, "kernel")?;
        let s = self.require(self.stride, "stride")?;
        let p = self.pad.unwrap_or(0);
        let c = self.require(self.channels, "channels")?;
        if k == 0 || s == 0 || c == 0 {
            return Err(Error::Config(format!(
                "layer {} has a zero kernel, stride or channel count",
                self.name
            )));
        }
        Ok((k, s, p, c))
    }
}

/// Resolved cross-layer references.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    None,
    /// Index of the pooling layer an unpool consumes.
    Pool(usize),
    /// Index of the layer whose output a crop matches; `None` for the input.
    CropTo(Option<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub layers: Vec<LayerSpec>,
    /// Batch extent is informational; forward accepts any batch size.
    pub input_shape: Shape4,
    pub num_classes: usize,
    pub scale: f64,
}

/// Static analysis of a config: per-layer output shapes (batch 1) and
/// resolved links.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeFlow {
    pub input: Shape4,
    pub outputs: Vec<Shape4>,
    /// Input channels of each layer.
    pub in_channels: Vec<usize>,
    pub links: Vec<Link>,
}

impl NetworkConfig {
    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn output_shape(&self) -> Result<Shape4> {
        let flow = self.shape_flow()?;
        Ok(*flow.outputs.last().expect("validated configs are nonempty"))
    }

    /// Walks the layer list computing every output shape; any inconsistency
    /// is a config error naming the offending layer.
    pub fn shape_flow(&self) -> Result<ShapeFlow> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.name == "input" || index.insert(l.name.as_str(), i).is_some() {
                return Err(Error::Config(format!("duplicate or reserved layer name {}", l.name)));
            }
        }
        let input = self.input_shape.with_n(1);
        input.validate()?;
        let mut outputs: Vec<Shape4> = Vec::with_capacity(self.layers.len());
        let mut in_channels = Vec::with_capacity(self.layers.len());
        let mut links = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let prev = if i == 0 { input } else { outputs[i - 1] };
            let err = |msg: String| Error::Config(format!("layer {}: {msg}", l.name));
            in_channels.push(prev.c);
            let (out, link) = match l.kind {
                LayerKind::Conv => {
                    let (k, s, p, c) = l.kernel_geometry()?;
                    let span = |len: usize| -> Result<usize> {
                        if len + 2 * p < k {
                            return Err(err(format!("kernel {k} larger than padded input {}", len + 2 * p)));
                        }
                        Ok((len + 2 * p - k) / s + 1)
                    };
                    (Shape4::new(1, c, span(prev.h)?, span(prev.w)?)?, Link::None)
                }
                LayerKind::Deconv => {
                    let (k, s, p, c) = l.kernel_geometry()?;
                    let span = |len: usize| -> Result<usize> {
                        let full = (len - 1) * s + k;
                        if full <= 2 * p {
                            return Err(err(format!("pad {p} leaves no output")));
                        }
                        Ok(full - 2 * p)
                    };
                    (Shape4::new(1, c, span(prev.h)?, span(prev.w)?)?, Link::None)
                }
                LayerKind::Maxpool => (
                    pooled_shape(prev).map_err(|e| err(e.to_string()))?,
                    Link::None,
                ),
                LayerKind::Maxunpool => {
                    let pair = l
                        .unpool_pair
                        .as_deref()
                        .ok_or_else(|| err("unpooling layer without a paired pool".into()))?;
                    let j = *index
                        .get(pair)
                        .ok_or_else(|| err(format!("paired pool {pair} does not exist")))?;
                    if j >= i || self.layers[j].kind != LayerKind::Maxpool {
                        return Err(err(format!("{pair} is not an earlier pooling layer")));
                    }
                    if outputs[j] != prev {
                        return Err(err(format!(
                            "input {prev} does not match {pair}'s output {}",
                            outputs[j]
                        )));
                    }
                    let pre = if j == 0 { input } else { outputs[j - 1] };
                    (pre, Link::Pool(j))
                }
                LayerKind::Relu | LayerKind::Batchnorm => (prev, Link::None),
                LayerKind::Softmax => {
                    if prev.c < 2 {
                        return Err(err("softmax over a single channel".into()));
                    }
                    (prev, Link::None)
                }
                LayerKind::Crop => {
                    let to = l
                        .crop_to
                        .as_deref()
                        .ok_or_else(|| err("crop layer without a target".into()))?;
                    let (target, link) = if to == "input" {
                        (input, Link::CropTo(None))
                    } else {
                        let j = *index
                            .get(to)
                            .ok_or_else(|| err(format!("crop target {to} does not exist")))?;
                        if j >= i {
                            return Err(err(format!("crop target {to} comes later")));
                        }
                        (outputs[j], Link::CropTo(Some(j)))
                    };
                    if target.h > prev.h || target.w > prev.w {
                        return Err(err(format!("cannot crop {prev} to {target}")));
                    }
                    (Shape4::new(1, prev.c, target.h, target.w)?, link)
                }
            };
            outputs.push(out);
            links.push(link);
        }
        let last = outputs.last().unwrap();
        if last.c != self.num_classes {
            return Err(Error::Config(format!(
                "final layer yields {} channels for {} classes",
                last.c, self.num_classes
            )));
        }
        Ok(ShapeFlow {
            input,
            outputs,
            in_channels,
            links,
        })
    }

    pub fn validate(&self) -> Result<ShapeFlow> {
        self.shape_flow()
    }

    /// Every pooling layer is consumed by exactly one unpooling layer at the
    /// mirrored depth, which restores the pool's input shape.
    pub fn check_mirrored(&self) -> Result<()> {
        let flow = self.shape_flow()?;
        let pools: Vec<usize> = (0..self.layers.len())
            .filter(|&i| self.layers[i].kind == LayerKind::Maxpool)
            .collect();
        let unpools: Vec<(usize, usize)> = flow
            .links
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Link::Pool(j) => Some((i, *j)),
                _ => None,
            })
            .collect();
        if pools.len() != unpools.len() {
            return Err(Error::Config(format!(
                "{} pooling layers but {} unpooling layers",
                pools.len(),
                unpools.len()
            )));
        }
        for (depth, &(u, p)) in unpools.iter().enumerate() {
            let mirrored = pools[pools.len() - 1 - depth];
            if p != mirrored {
                return Err(Error::Config(format!(
                    "{} pairs with {} but the mirrored pool is {}",
                    self.layers[u].name, self.layers[p].name, self.layers[mirrored].name
                )));
            }
            let pre = if p == 0 { flow.input } else { flow.outputs[p - 1] };
            if flow.outputs[u] != pre {
                return Err(Error::Config(format!(
                    "{} does not restore the shape pooled by {}",
                    self.layers[u].name, self.layers[p].name
                )));
            }
        }
        Ok(())
    }

    /// Learnable and frozen weights plus batchnorm scale/shift; running
    /// statistics are not counted.
    pub fn param_count(&self) -> Result<usize> {
        let flow = self.shape_flow()?;
        let mut total = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let cin = flow.in_channels[i];
            match l.kind {
                LayerKind::Conv | LayerKind::Deconv => {
                    let (k, _, _, c) = l.kernel_geometry()?;
                    total += c * cin * k * k + c;
                }
                LayerKind::Batchnorm => total += 2 * cin,
                _ => {}
            }
        }
        Ok(total)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(s)?;
        cfg.shape_flow()?;
        Ok(cfg)
    }
}

fn scaled(channels: usize, scale: f64) -> Result<usize> {
    let c = (channels as f64 * scale).round() as usize;
    if c == 0 {
        return Err(Error::Config(format!(
            "scale {scale} leaves no channels for a {channels}-channel layer"
        )));
    }
    Ok(c)
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Config(format!("scale {scale} outside (0, 1]")));
    }
    Ok(())
}

fn check_side(side: usize) -> Result<usize> {
    if side == 0 || side % ENCODER_STRIDE != 0 {
        return Err(Error::Config(format!(
            "input side {side} is not a positive multiple of {ENCODER_STRIDE}"
        )));
    }
    Ok(side / ENCODER_STRIDE)
}

fn push_conv_bn_relu(layers: &mut Vec<LayerSpec>, spec: LayerSpec) {
    let name = spec.name.clone();
    layers.push(spec);
    layers.push(LayerSpec::batchnorm(format!("{name}/bn")));
    layers.push(LayerSpec::relu(format!("{name}/relu")));
}

fn encoder(scale: f64) -> Result<Vec<LayerSpec>> {
    let mut layers = Vec::new();
    for (b, &(channels, depth)) in ENCODER_BLOCKS.iter().enumerate() {
        for d in 0..depth {
            let name = format!("conv{}-{}", b + 1, d + 1);
            push_conv_bn_relu(&mut layers, LayerSpec::conv(name, 3, 1, 1, scaled(channels, scale)?));
        }
        layers.push(LayerSpec::maxpool(format!("pool{}", b + 1)));
    }
    Ok(layers)
}

/// The full deconvolution network at 224x224 input, with channel widths
/// multiplied by `scale`.
pub fn build_deconvnet(num_classes: usize, scale: f64) -> Result<NetworkConfig> {
    build_deconvnet_for_input(num_classes, scale, FULL_INPUT_SIDE)
}

/// Deconvolution network for a square input of `side` pixels (a multiple of
/// 32). The fc6 kernel and its mirror shrink to the encoder's final extent.
pub fn build_deconvnet_for_input(num_classes: usize, scale: f64, side: usize) -> Result<NetworkConfig> {
    check_scale(scale)?;
    let fc_kernel = check_side(side)?;
    let mut layers = encoder(scale)?;
    let fc = scaled(FC_CHANNELS, scale)?;
    push_conv_bn_relu(&mut layers, LayerSpec::conv("fc6", fc_kernel, 1, 0, fc));
    push_conv_bn_relu(&mut layers, LayerSpec::conv("fc7", 1, 1, 0, fc));
    push_conv_bn_relu(
        &mut layers,
        LayerSpec::deconv("deconv-fc6", fc_kernel, 1, 0, scaled(512, scale)?),
    );
    for (i, block) in DECODER_BLOCKS.iter().enumerate() {
        let level = 5 - i;
        layers.push(LayerSpec::maxunpool(format!("unpool{level}"), format!("pool{level}")));
        for (d, &channels) in block.iter().enumerate() {
            let name = format!("deconv{level}-{}", d + 1);
            push_conv_bn_relu(&mut layers, LayerSpec::deconv(name, 3, 1, 1, scaled(channels, scale)?));
        }
    }
    layers.push(LayerSpec::conv("output", 1, 1, 0, num_classes));
    let cfg = NetworkConfig {
        layers,
        input_shape: Shape4::new(1, 3, side, side)?,
        num_classes,
        scale,
    };
    cfg.shape_flow()?;
    Ok(cfg)
}

/// FCN-style baseline at 224x224 input.
pub fn build_fcn_baseline(num_classes: usize, scale: f64) -> Result<NetworkConfig> {
    build_fcn_baseline_for_input(num_classes, scale, FULL_INPUT_SIDE)
}

/// Encoder of the deconvolution network, a spatially-preserving fc6/fc7, a
/// 1x1 score layer, and a frozen bilinear upsampling by 32 back to the input
/// size.
pub fn build_fcn_baseline_for_input(num_classes: usize, scale: f64, side: usize) -> Result<NetworkConfig> {
    check_scale(scale)?;
    let coarse = check_side(side)?;
    let mut layers = encoder(scale)?;
    let fc = scaled(FC_CHANNELS, scale)?;
    // fc6 keeps the coarse grid, so its kernel must be odd to pad symmetrically.
    let k = if coarse % 2 == 1 { coarse } else { coarse + 1 };
    push_conv_bn_relu(&mut layers, LayerSpec::conv("fc6", k, 1, k / 2, fc));
    push_conv_bn_relu(&mut layers, LayerSpec::conv("fc7", 1, 1, 0, fc));
    layers.push(LayerSpec::conv("score", 1, 1, 0, num_classes));
    let factor = ENCODER_STRIDE;
    layers.push(LayerSpec {
        frozen: true,
        init: WeightInit::Bilinear,
        ..LayerSpec::deconv("upsample", 2 * factor, factor, factor / 2, num_classes)
    });
    let cfg = NetworkConfig {
        layers,
        input_shape: Shape4::new(1, 3, side, side)?,
        num_classes,
        scale,
    };
    cfg.shape_flow()?;
    Ok(cfg)
}
