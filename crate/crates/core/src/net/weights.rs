//! Named-entry weight container.
//!
//! Layout (little-endian): magic `DSWC`, version `u32`, manifest length `u64`,
//! the JSON manifest, then one tensor record per manifest entry in order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::model::{LayerParams, Model};
use crate::error::{Error, Result};
use crate::layers::{BatchNormState, ConvParams, Mode};
use crate::tensor::{read_tensor, write_tensor};
use crate::tensor::{DType, Scalar, Shape4, Tensor};

pub const CONTAINER_MAGIC: [u8; 4] = *b"DSWC";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryInfo {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: NetworkConfig,
    pub entries: Vec<EntryInfo>,
    /// Batchnorm layers whose running statistics hold at least one batch.
    pub bn_recorded: Vec<String>,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Decoded container: the manifest plus every tensor by name.
#[derive(Debug, Clone)]
pub struct Container<T: Scalar = f32> {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

fn vector_tensor<T: Scalar>(v: &[T]) -> Result<Tensor<T>> {
    Tensor::from_vec(Shape4::new(1, v.len().max(1), 1, 1)?, if v.is_empty() { vec![T::zero()] } else { v.to_vec() })
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

/// Every stored tensor of a model, frozen layers and running statistics
/// included, in layer order.
pub fn model_entries<T: Scalar>(model: &Model<T>) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::new();
    for (spec, params) in model.config().layers.iter().zip(model.layers()) {
        let name = &spec.name;
        match params {
            LayerParams::None => {}
            LayerParams::Conv(p) => {
                out.push((format!("{name}.weight"), p.weights.clone()));
                out.push((format!("{name}.bias"), vector_tensor(&p.bias)?));
            }
            LayerParams::BatchNorm(b) => {
                out.push((format!("{name}.gamma"), vector_tensor(&b.gamma)?));
                out.push((format!("{name}.beta"), vector_tensor(&b.beta)?));
                out.push((format!("{name}.running_mean"), vector_tensor(&b.running_mean)?));
                out.push((format!("{name}.running_var"), vector_tensor(&b.running_var)?));
            }
        }
    }
    Ok(out)
}

/// Serializes a model together with extra named tensors and free-form
/// metadata.
pub fn encode_container<T: Scalar>(
    model: &Model<T>,
    extra: &[(String, Tensor<T>)],
    metadata: serde_json::Value,
) -> Result<Vec<u8>> {
    let mut entries = model_entries(model)?;
    entries.extend(extra.iter().cloned());
    let mut seen = std::collections::HashSet::new();
    for (name, _) in &entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate container entry {name}")));
        }
    }
    let mut bn_recorded = Vec::new();
    let (mut eps, mut mom) = (crate::layers::DEFAULT_EPSILON, crate::layers::DEFAULT_MOMENTUM);
    for (spec, params) in model.config().layers.iter().zip(model.layers()) {
        if let LayerParams::BatchNorm(b) = params {
            eps = b.epsilon;
            mom = b.momentum;
            if b.stats_recorded {
                bn_recorded.push(spec.name.clone());
            }
        }
    }
    let manifest = Manifest {
        config: model.config().clone(),
        entries: entries
            .iter()
            .map(|(name, t)| EntryInfo {
                name: name.clone(),
                shape: t.shape().dims(),
                dtype: dtype_name(T::DTYPE).into(),
            })
            .collect(),
        bn_recorded,
        bn_epsilon: eps,
        bn_momentum: mom,
        metadata,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &entries {
        write_tensor(&mut buf, t)?;
    }
    Ok(buf)
}

pub fn decode_container<T: Scalar>(bytes: &[u8]) -> Result<Container<T>> {
    if bytes.len() < 16 || bytes[0..4] != CONTAINER_MAGIC {
        return Err(Error::Format("not a weight container".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    let mut cursor = Cursor::new(&bytes[end..]);
    let mut tensors = BTreeMap::new();
    for entry in &manifest.entries {
        let t: Tensor<T> = read_tensor(&mut cursor)
            .map_err(|e| Error::Format(format!("entry {}: {e}", entry.name)))?;
        if t.shape().dims() != entry.shape {
            return Err(Error::Format(format!("entry {} disagrees with its manifest shape", entry.name)));
        }
        tensors.insert(entry.name.clone(), t);
    }
    if cursor.position() as usize != bytes.len() - end {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(Container { manifest, tensors })
}

impl<T: Scalar> Container<T> {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        decode_container(&fs::read(path)?)
    }

    /// Builds a model of `config` from the stored tensors. The first layer
    /// whose stored shape disagrees is named in the error.
    pub fn model_for(&self, config: NetworkConfig) -> Result<Model<T>> {
        let template = Model::<T>::skeleton(config.clone())?;
        let recorded: std::collections::HashSet<&str> =
            self.manifest.bn_recorded.iter().map(String::as_str).collect();
        let mut layers = Vec::with_capacity(template.layers().len());
        for (spec, params) in config.layers.iter().zip(template.layers()) {
            let name = &spec.name;
            let fetch = |suffix: &str, want: Shape4| -> Result<Vec<T>> {
                let key = format!("{name}.{suffix}");
                let t = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::shape("load_weights", format!("layer {name}: entry {key} missing")))?;
                if t.shape() != want {
                    return Err(Error::shape(
                        "load_weights",
                        format!("layer {name}: {suffix} stored as {}, config expects {want}", t.shape()),
                    ));
                }
                Ok(t.data().to_vec())
            };
            let vshape = |len: usize| Shape4::new(1, len, 1, 1);
            let loaded = match params {
                LayerParams::None => LayerParams::None,
                LayerParams::Conv(p) => {
                    let ws = p.weights.shape();
                    let weights = Tensor::from_vec(ws, fetch("weight", ws)?)?;
                    let bias = fetch("bias", vshape(p.bias.len())?)?;
                    LayerParams::Conv(ConvParams::new(weights, bias, p.stride, p.pad)?)
                }
                LayerParams::BatchNorm(b) => {
                    let c = b.channels();
                    LayerParams::BatchNorm(BatchNormState {
                        gamma: fetch("gamma", vshape(c)?)?,
                        beta: fetch("beta", vshape(c)?)?,
                        running_mean: fetch("running_mean", vshape(c)?)?,
                        running_var: fetch("running_var", vshape(c)?)?,
                        epsilon: self.manifest.bn_epsilon,
                        momentum: self.manifest.bn_momentum,
                        mode: Mode::Train,
                        stats_recorded: recorded.contains(name.as_str()),
                    })
                }
            };
            layers.push(loaded);
        }
        Model::from_parts(config, layers)
    }

    /// Model of the embedded config.
    pub fn model(&self) -> Result<Model<T>> {
        self.model_for(self.manifest.config.clone())
    }

    /// Tensors whose names start with `prefix`, prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, &Tensor<T>> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v)))
            .collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_weights<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    save_container(model, &[], serde_json::Value::Null, path)
}

pub fn save_container<T: Scalar>(
    model: &Model<T>,
    extra: &[(String, Tensor<T>)],
    metadata: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode_container(model, extra, metadata)?)
}

/// Loads a model with the config embedded in the file.
pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    Container::read(path)?.model()
}

/// Loads stored weights into the given config.
pub fn load_weights_into<T: Scalar>(config: NetworkConfig, path: impl AsRef<Path>) -> Result<Model<T>> {
    Container::read(path)?.model_for(config)
}
