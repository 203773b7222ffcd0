//! Whole-image segmentation from per-proposal predictions: selection,
//! placement, max/sum aggregation, softmax, and ensembling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{crop_tensor, extend_box, grid_proposals, resize_bilinear, BoxGeometry, PixelMean, Sample, BOX_EXTENSION};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::net::Model;
use crate::tensor::{Shape4, Tensor};

/// Number of proposals kept per image.
pub const DEFAULT_TOP_K: usize = 50;
/// Value of uncovered pixels in max-mode placed maps.
pub const MAX_NEUTRAL: f32 = -1.0e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    #[default]
    Max,
    Sum,
}

impl AggregationMode {
    pub fn neutral(self) -> f32 {
        match self {
            AggregationMode::Max => MAX_NEUTRAL,
            AggregationMode::Sum => 0.0,
        }
    }
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(AggregationMode::Max),
            "sum" => Ok(AggregationMode::Sum),
            _ => Err(Error::Inference(format!("unknown aggregation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalPrediction {
    /// Extended box the crop was taken from.
    pub footprint: BoxGeometry,
    /// `(1, C, side, side)` logits.
    pub score_map: Tensor<f32>,
}

/// A score map in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedMap {
    pub values: Tensor<f32>,
    pub footprint: BoxGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedMap {
    pub values: Tensor<f32>,
    pub mode: AggregationMode,
    /// Number of proposals covering each pixel.
    pub coverage: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: AggregationMode,
    pub top_k: usize,
    pub ensemble: bool,
    pub grid_fallback: bool,
    pub proposals: Vec<BoxGeometry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// `(1, C, H, W)` per-pixel distributions.
    pub class_probs: Tensor<f32>,
    pub label_mask: LabelMask,
    pub provenance: Provenance,
}

/// The `top_k` highest-scoring boxes; ties keep input order.
pub fn select_proposals(all: &[BoxGeometry], top_k: usize) -> Result<Vec<BoxGeometry>> {
    if all.is_empty() {
        return Err(Error::Inference("no proposals to select from".into()));
    }
    let mut v = all.to_vec();
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v.truncate(top_k);
    Ok(v)
}

/// Crops the extended box, resizes it to the network side, and returns the
/// network's logits.
pub fn predict_proposal(
    model: &Model<f32>,
    image: &Tensor<f32>,
    b: &BoxGeometry,
    mean: &PixelMean,
) -> Result<ProposalPrediction> {
    let s = image.shape();
    let footprint = extend_box(b, BOX_EXTENSION, s.w, s.h).map_err(|e| Error::Inference(e.to_string()))?;
    let side = model.input_side();
    let crop = resize_bilinear(&crop_tensor(image, &footprint)?, side, side)?;
    let score_map = model.infer(&mean.apply(&crop))?;
    Ok(ProposalPrediction { footprint, score_map })
}

/// Resizes a prediction back onto its footprint inside an `height x width`
/// image, filling every other pixel with the mode's neutral value.
pub fn place_in_image(pred: &ProposalPrediction, height: usize, width: usize, mode: AggregationMode) -> Result<PlacedMap> {
    let f = pred.footprint;
    if !f.fits(width, height) {
        return Err(Error::Inference(format!("footprint {f} outside {width}x{height} image")));
    }
    let c = pred.score_map.shape().c;
    let patch = resize_bilinear(&pred.score_map, f.height(), f.width())?;
    let mut values = Tensor::full(Shape4::new(1, c, height, width)?, mode.neutral())?;
    for k in 0..c {
        let src = patch.plane(0, k);
        let dst = values.plane_mut(0, k);
        for (r, y) in (f.y0..f.y1).enumerate() {
            dst[y * width + f.x0..y * width + f.x1].copy_from_slice(&src[r * f.width()..(r + 1) * f.width()]);
        }
    }
    Ok(PlacedMap { values, footprint: f })
}

/// Pixel-wise maximum or sum over placed maps, merged in list order.
pub fn aggregate(maps: &[PlacedMap], mode: AggregationMode) -> Result<AggregatedMap> {
    let first = maps.first().ok_or_else(|| Error::Inference("nothing to aggregate".into()))?;
    let s = first.values.shape();
    let mut values = first.values.clone();
    for m in &maps[1..] {
        if m.values.shape() != s {
            return Err(Error::Inference(format!("placed map {} differs from {s}", m.values.shape())));
        }
        for (a, &b) in values.data_mut().iter_mut().zip(m.values.data()) {
            match mode {
                AggregationMode::Max => *a = a.max(b),
                AggregationMode::Sum => *a += b,
            }
        }
    }
    let mut coverage = vec![0u32; s.plane()];
    for m in maps {
        let f = m.footprint;
        for y in f.y0..f.y1.min(s.h) {
            for c in &mut coverage[y * s.w + f.x0..y * s.w + f.x1.min(s.w)] {
                *c += 1;
            }
        }
    }
    Ok(AggregatedMap { values, mode, coverage })
}

/// Per-pixel softmax and argmax; uncovered pixels are background with
/// probability one.
pub fn finalize(p: &AggregatedMap, provenance: Provenance) -> Result<SegmentationResult> {
    let s = p.values.shape();
    let plane = s.plane();
    let mut probs = Tensor::zeros(s)?;
    let mut labels = vec![0u8; plane];
    let src = p.values.data();
    let dst = probs.data_mut();
    let mut buf = vec![0f64; s.c];
    for px in 0..plane {
        if p.coverage[px] == 0 {
            dst[px] = 1.0;
            continue;
        }
        let mut best = 0;
        for k in 0..s.c {
            buf[k] = src[k * plane + px] as f64;
            if buf[k] > buf[best] {
                best = k;
            }
        }
        let m = buf[best];
        let mut z = 0.0;
        for v in buf.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for k in 0..s.c {
            dst[k * plane + px] = (buf[k] / z) as f32;
        }
        labels[px] = best as u8;
    }
    Ok(SegmentationResult {
        class_probs: probs,
        label_mask: LabelMask::new(s.h, s.w, labels)?,
        provenance,
    })
}

/// Argmax labels of a probability tensor, lowest class on ties.
pub fn labels_of(probs: &Tensor<f32>) -> Result<LabelMask> {
    let s = probs.shape();
    LabelMask::new(s.h, s.w, probs.argmax_channels().into_iter().map(|l| l as u8).collect())
}

/// Pixel-wise mean of two probability maps.
pub fn ensemble_mean(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::Inference(format!("ensemble of {} and {}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = (*o + v) / 2.0;
    }
    Ok(out)
}

/// Whole-image probabilities from a network applied to the resized image.
pub fn whole_image_probs(model: &Model<f32>, image: &Tensor<f32>, mean: &PixelMean) -> Result<Tensor<f32>> {
    let s = image.shape();
    let side = model.input_side();
    let logits = model.infer(&mean.apply(&resize_bilinear(image, side, side)?))?;
    let full = resize_bilinear(&logits, s.h, s.w)?;
    let agg = AggregatedMap {
        values: full,
        mode: AggregationMode::Max,
        coverage: vec![1; s.plane()],
    };
    Ok(finalize(&agg, Provenance::default())?.class_probs)
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            mode: AggregationMode::Max,
            top_k: 0,
            ensemble: false,
            grid_fallback: false,
            proposals: Vec::new(),
        }
    }
}

/// Refinement applied to final probabilities. Receives the image and the
/// probabilities.
pub type RefineHook = fn(&Tensor<f32>, Tensor<f32>) -> Tensor<f32>;

pub fn no_refine(_image: &Tensor<f32>, probs: Tensor<f32>) -> Tensor<f32> {
    probs
}

#[derive(Debug, Clone)]
pub struct SegmentOptions {
    pub mode: AggregationMode,
    pub top_k: usize,
    pub grid_scales: Vec<usize>,
    pub grid_stride: usize,
    pub mean: PixelMean,
    pub refine: RefineHook,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            mode: AggregationMode::Max,
            top_k: DEFAULT_TOP_K,
            grid_scales: vec![32, 48, 64, 96],
            grid_stride: 16,
            mean: PixelMean::default(),
            refine: no_refine,
        }
    }
}

/// Proposals placed in image space, predicted in parallel and returned in
/// proposal order.
pub fn placed_predictions(
    model: &Model<f32>,
    image: &Tensor<f32>,
    proposals: &[BoxGeometry],
    mode: AggregationMode,
    mean: &PixelMean,
) -> Result<Vec<PlacedMap>> {
    let s = image.shape();
    proposals
        .par_iter()
        .map(|b| place_in_image(&predict_proposal(model, image, b, mean)?, s.h, s.w, mode))
        .collect()
}

/// Select, predict, place, aggregate and finalize; optionally averaged with
/// a whole-image baseline.
pub fn segment_image(
    model: &Model<f32>,
    baseline: Option<&Model<f32>>,
    image: &Tensor<f32>,
    proposals: Option<&[BoxGeometry]>,
    opts: &SegmentOptions,
) -> Result<SegmentationResult> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Inference(format!("expected one RGB image, got {s}")));
    }
    let grid_fallback = proposals.is_none();
    let candidates = match proposals {
        Some(p) => p.to_vec(),
        None => {
            let probe = Sample {
                id: String::new(),
                image: image.clone(),
                mask: LabelMask::filled(s.h, s.w, 0),
                instances: Vec::new(),
            };
            let scales: Vec<usize> = opts.grid_scales.iter().map(|&k| k.min(s.h.min(s.w))).collect();
            grid_proposals(&probe, &scales, opts.grid_stride)?
        }
    };
    let selected = select_proposals(&candidates, opts.top_k)?;
    let placed = placed_predictions(model, image, &selected, opts.mode, &opts.mean)?;
    let provenance = Provenance {
        mode: opts.mode,
        top_k: opts.top_k,
        ensemble: baseline.is_some(),
        grid_fallback,
        proposals: selected,
    };
    let mut result = finalize(&aggregate(&placed, opts.mode)?, provenance)?;
    if let Some(b) = baseline {
        let other = whole_image_probs(b, image, &opts.mean)?;
        result.class_probs = ensemble_mean(&result.class_probs, &other)?;
    }
    result.class_probs = (opts.refine)(image, result.class_probs);
    result.label_mask = labels_of(&result.class_probs)?;
    Ok(result)
}
