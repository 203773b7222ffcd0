//! Run configuration: one JSON document covering network, optimizer, data,
//! stage budgets and inference settings.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deconvseg::infer::{AggregationMode, DEFAULT_TOP_K};
use deconvseg::net::{build_deconvnet_for_input, build_fcn_baseline_for_input};
use deconvseg::train::CurriculumSettings;
use deconvseg::{NetworkConfig, OptimConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSettings {
    /// Channel width multiplier.
    pub scale: f64,
    pub classes: usize,
    /// Square input side, a multiple of 32.
    pub side: usize,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        NetworkSettings {
            scale: 0.125,
            classes: deconvseg::data::SYNTH_CLASSES,
            side: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    /// Dataset directory or manifest file.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Newline-delimited proposal records used for stage 2.
    pub proposals: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageBudgets {
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    pub baseline_iters: u64,
}

impl Default for StageBudgets {
    fn default() -> Self {
        StageBudgets {
            stage1_iters: 2000,
            stage2_iters: 4000,
            baseline_iters: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceSettings {
    pub mode: AggregationMode,
    pub top_k: usize,
    pub grid_scales: Vec<usize>,
    pub grid_stride: usize,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        let d = deconvseg::infer::SegmentOptions::default();
        InferenceSettings {
            mode: AggregationMode::Max,
            top_k: DEFAULT_TOP_K,
            grid_scales: d.grid_scales,
            grid_stride: d.grid_stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub side: usize,
    pub classes: Vec<u8>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 500,
            side: 96,
            classes: vec![1, 2, 3],
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: NetworkSettings,
    pub optimizer: OptimConfig,
    pub data: DataPaths,
    pub stages: StageBudgets,
    pub curriculum: CurriculumSettings,
    pub inference: InferenceSettings,
    pub synth: SynthConfig,
    pub model_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkSettings::default(),
            optimizer: OptimConfig {
                batch_size: 16,
                ..OptimConfig::default()
            },
            data: DataPaths::default(),
            stages: StageBudgets::default(),
            curriculum: CurriculumSettings::default(),
            inference: InferenceSettings::default(),
            synth: SynthConfig::default(),
            model_seed: 1,
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-checks the sections against each other and the network's shape
    /// flow.
    pub fn validate(&self) -> Result<()> {
        self.network_config()?;
        self.optimizer.validate()?;
        if self.curriculum.side != self.network.side {
            bail!(
                "curriculum side {} differs from network side {}",
                self.curriculum.side,
                self.network.side
            );
        }
        if self.inference.top_k == 0 {
            bail!("inference top_k must be positive");
        }
        if self.inference.grid_scales.is_empty() || self.inference.grid_stride == 0 {
            bail!("inference grid needs scales and a positive stride");
        }
        Ok(())
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let n = &self.network;
        Ok(build_deconvnet_for_input(n.classes, n.scale, n.side)?)
    }

    pub fn baseline_config(&self) -> Result<NetworkConfig> {
        let n = &self.network;
        Ok(build_fcn_baseline_for_input(n.classes, n.scale, n.side)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
