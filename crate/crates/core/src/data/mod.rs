//! Datasets, synthetic shapes, and the two training example sets.

mod boxes;
mod examples;
pub mod image_io;
pub mod synth;
mod voc;

use serde::{Deserialize, Serialize};

use crate::mask::LabelMask;
use crate::tensor::Tensor;

pub use boxes::{crop_tensor, extend_box, flip_tensor, resize_bilinear, BoxGeometry, BOX_EXTENSION};
pub use examples::{
    augment, balance_classes, crop_mask, dominant_class, flip_mask, grid_proposals, make_stage1_examples,
    make_stage2_examples, resize_nearest, resize_side_for, whole_image_examples, SkipReport, DEFAULT_IOU_MIN,
    MIN_INSTANCE_SIDE, RESIZE_RATIO,
};
pub use synth::{synth_shapes, synth_shapes_with, SynthSettings, SYNTH_CLASSES, SYNTH_CLASS_NAMES};
pub use voc::{
    connected_instances, load_manifest, load_voc_style, read_proposals, write_dataset, write_proposals,
    DatasetManifest, ManifestEntry, ProposalRecord, MANIFEST_FILE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: u8,
    pub bbox: BoxGeometry,
    /// Flat row-major pixel offsets.
    pub pixels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: LabelMask,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// `(1, 3, side, side)` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: LabelMask,
    pub stage: u8,
    pub sample_id: String,
    /// Extended box the example was cut from.
    pub crop: BoxGeometry,
}

/// Per-channel mean subtracted from `[0, 1]` images before they enter a
/// network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMean(pub [f32; 3]);

impl Default for PixelMean {
    fn default() -> Self {
        PixelMean([0.5, 0.5, 0.5])
    }
}

impl PixelMean {
    pub fn apply(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let s = image.shape();
        let mut out = image.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let m = self.0[c % 3];
                for v in out.plane_mut(n, c) {
                    *v -= m;
                }
            }
        }
        out
    }
}
