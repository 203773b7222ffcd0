use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::boxes::{crop_tensor, extend_box, flip_tensor, resize_bilinear, BoxGeometry, BOX_EXTENSION};
use super::{Sample, TrainingExample};
use crate::error::{Error, Result};
use crate::mask::{LabelMask, IGNORE_LABEL};
use crate::tensor::Tensor;

/// Instances whose longer box side is below this are not turned into
/// stage-1 examples.
pub const MIN_INSTANCE_SIDE: usize = 8;
pub const DEFAULT_IOU_MIN: f64 = 0.5;

/// Ratio between the pre-crop resize side and the network side.
pub const RESIZE_RATIO: f64 = 250.0 / 224.0;

pub fn resize_side_for(out_side: usize) -> usize {
    (out_side as f64 * RESIZE_RATIO).round() as usize
}

pub fn crop_mask(m: &LabelMask, b: &BoxGeometry) -> Result<LabelMask> {
    if !b.fits(m.width(), m.height()) {
        return Err(Error::Data(format!("box {b} outside {}x{} mask", m.width(), m.height())));
    }
    let mut out = Vec::with_capacity(b.area());
    for y in b.y0..b.y1 {
        out.extend_from_slice(&m.labels()[y * m.width() + b.x0..y * m.width() + b.x1]);
    }
    LabelMask::new(b.height(), b.width(), out)
}

/// Nearest-neighbor resampling with pixel-center alignment.
pub fn resize_nearest(m: &LabelMask, out_h: usize, out_w: usize) -> Result<LabelMask> {
    let pick = |o: usize, out_len: usize, in_len: usize| {
        (((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    let mut labels = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, out_h, m.height());
        for x in 0..out_w {
            labels.push(m.get(sy, pick(x, out_w, m.width())));
        }
    }
    LabelMask::new(out_h, out_w, labels)
}

pub fn flip_mask(m: &LabelMask) -> LabelMask {
    let mut out = m.clone();
    let w = m.width();
    for row in out.labels_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Crops the extended form of `b` and resizes it to `side x side`.
fn crop_example(
    image: &Tensor<f32>,
    mask: &LabelMask,
    b: &BoxGeometry,
    side: usize,
) -> Result<(BoxGeometry, Tensor<f32>, LabelMask)> {
    let ext = extend_box(b, BOX_EXTENSION, mask.width(), mask.height())?;
    let img = resize_bilinear(&crop_tensor(image, &ext)?, side, side)?;
    let m = resize_nearest(&crop_mask(mask, &ext)?, side, side)?;
    Ok((ext, img, m))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    /// `(sample id, instance index)` of instances too small to crop.
    pub skipped: Vec<(String, usize)>,
}

/// One centered example per instance: the extended instance box, with every
/// pixel outside the instance relabeled background.
pub fn make_stage1_examples(samples: &[Sample], side: usize) -> Result<(Vec<TrainingExample>, SkipReport)> {
    let per_sample: Vec<Result<(Vec<TrainingExample>, Vec<(String, usize)>)>> = samples
        .par_iter()
        .map(|s| {
            let mut out = Vec::new();
            let mut skipped = Vec::new();
            for (k, inst) in s.instances.iter().enumerate() {
                if inst.bbox.width().max(inst.bbox.height()) < MIN_INSTANCE_SIDE {
                    skipped.push((s.id.clone(), k));
                    continue;
                }
                let mut m = s.mask.clone();
                for l in m.labels_mut() {
                    if *l != IGNORE_LABEL {
                        *l = 0;
                    }
                }
                for &p in &inst.pixels {
                    m.labels_mut()[p as usize] = inst.class;
                }
                let (ext, image, mask) = crop_example(&s.image, &m, &inst.bbox, side)?;
                out.push(TrainingExample {
                    image,
                    mask,
                    stage: 1,
                    sample_id: s.id.clone(),
                    crop: ext,
                });
            }
            Ok((out, skipped))
        })
        .collect();
    let mut examples = Vec::new();
    let mut report = SkipReport::default();
    for r in per_sample {
        let (e, s) = r?;
        examples.extend(e);
        report.skipped.extend(s);
    }
    Ok((examples, report))
}

/// Examples from proposals overlapping some ground-truth instance box with
/// IoU at least `iou_min`; masks keep every label in the crop.
pub fn make_stage2_examples(
    samples: &[Sample],
    proposals: &BTreeMap<String, Vec<BoxGeometry>>,
    iou_min: f64,
    side: usize,
) -> Result<Vec<TrainingExample>> {
    let per_sample: Vec<Result<Vec<TrainingExample>>> = samples
        .par_iter()
        .map(|s| {
            let mut out = Vec::new();
            let Some(boxes) = proposals.get(&s.id) else {
                return Ok(out);
            };
            for b in boxes {
                let best = s.instances.iter().map(|i| i.bbox.iou(b)).fold(0.0, f64::max);
                if best < iou_min || b.width() < 2 || b.height() < 2 {
                    continue;
                }
                let (ext, image, mask) = crop_example(&s.image, &s.mask, b, side)?;
                out.push(TrainingExample {
                    image,
                    mask,
                    stage: 2,
                    sample_id: s.id.clone(),
                    crop: ext,
                });
            }
            Ok(out)
        })
        .collect();
    let mut examples = Vec::new();
    for r in per_sample {
        examples.extend(r?);
    }
    Ok(examples)
}

/// Whole images resized to `side x side`, for training whole-image
/// baselines. Marked stage 0.
pub fn whole_image_examples(samples: &[Sample], side: usize) -> Result<Vec<TrainingExample>> {
    samples
        .par_iter()
        .map(|s| {
            let (h, w) = (s.mask.height(), s.mask.width());
            Ok(TrainingExample {
                image: resize_bilinear(&s.image, side, side)?,
                mask: resize_nearest(&s.mask, side, side)?,
                stage: 0,
                sample_id: s.id.clone(),
                crop: BoxGeometry::new(0, 0, w, h)?,
            })
        })
        .collect()
}

/// Resizes to `resize_side`, takes a seeded random `out_side` crop, and
/// mirrors if `flip` is set.
pub fn augment(ex: &TrainingExample, out_side: usize, resize_side: usize, flip: bool, seed: u64) -> Result<TrainingExample> {
    if resize_side < out_side || out_side == 0 {
        return Err(Error::Data(format!("cannot crop {out_side} out of {resize_side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.random_range(0..=resize_side - out_side);
    let ox = rng.random_range(0..=resize_side - out_side);
    let window = BoxGeometry::new(ox, oy, ox + out_side, oy + out_side)?;
    let mut image = crop_tensor(&resize_bilinear(&ex.image, resize_side, resize_side)?, &window)?;
    let mut mask = crop_mask(&resize_nearest(&ex.mask, resize_side, resize_side)?, &window)?;
    if flip {
        image = flip_tensor(&image);
        mask = flip_mask(&mask);
    }
    Ok(TrainingExample {
        image,
        mask,
        ..ex.clone()
    })
}

/// Most frequent foreground label, lowest id on ties.
pub fn dominant_class(m: &LabelMask) -> Option<u8> {
    let mut counts = [0usize; 256];
    for &l in m.labels() {
        counts[l as usize] += 1;
    }
    (1..255u8).filter(|&c| counts[c as usize] > 0).max_by(|&a, &b| {
        counts[a as usize].cmp(&counts[b as usize]).then(b.cmp(&a))
    })
}

/// Duplicates examples of under-represented classes, round-robin in input
/// order, until every class has at least half the largest class count.
/// Inputs are returned first and never dropped.
pub fn balance_classes(examples: Vec<TrainingExample>) -> Vec<TrainingExample> {
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        if let Some(c) = dominant_class(&e.mask) {
            by_class.entry(c).or_default().push(i);
        }
    }
    let max = by_class.values().map(Vec::len).max().unwrap_or(0);
    let target = max.div_ceil(2);
    let mut extra = Vec::new();
    for idx in by_class.values() {
        for k in 0..target.saturating_sub(idx.len()) {
            extra.push(idx[k % idx.len()]);
        }
    }
    let mut out = examples;
    out.reserve(extra.len());
    for i in extra {
        out.push(out[i].clone());
    }
    out
}

/// Sliding square windows at each scale, scored by the summed per-channel
/// intensity variance inside the window, best first (stable).
pub fn grid_proposals(sample: &Sample, scales: &[usize], stride: usize) -> Result<Vec<BoxGeometry>> {
    if scales.is_empty() || stride == 0 || scales.contains(&0) {
        return Err(Error::Data("grid proposals need positive scales and stride".into()));
    }
    let s = sample.image.shape();
    let (h, w) = (s.h, s.w);
    // Integral images of x and x^2 per channel.
    let stride_i = w + 1;
    let mut sums = vec![vec![0f64; (h + 1) * (w + 1)]; 2 * s.c];
    for c in 0..s.c {
        let p = sample.image.plane(0, c);
        for y in 0..h {
            for x in 0..w {
                let v = p[y * w + x] as f64;
                for (k, val) in [(2 * c, v), (2 * c + 1, v * v)] {
                    let t = &mut sums[k];
                    t[(y + 1) * stride_i + x + 1] = val + t[y * stride_i + x + 1] + t[(y + 1) * stride_i + x] - t[y * stride_i + x];
                }
            }
        }
    }
    let rect = |t: &[f64], b: &BoxGeometry| {
        t[b.y1 * stride_i + b.x1] - t[b.y0 * stride_i + b.x1] - t[b.y1 * stride_i + b.x0] + t[b.y0 * stride_i + b.x0]
    };
    let mut out = Vec::new();
    for &scale in scales {
        if scale > h || scale > w {
            continue;
        }
        for y in (0..=h - scale).step_by(stride) {
            for x in (0..=w - scale).step_by(stride) {
                let b = BoxGeometry::new(x, y, x + scale, y + scale)?;
                let n = b.area() as f64;
                let score: f64 = (0..s.c)
                    .map(|c| {
                        let mean = rect(&sums[2 * c], &b) / n;
                        (rect(&sums[2 * c + 1], &b) / n - mean * mean).max(0.0)
                    })
                    .sum();
                out.push(b.with_score(score));
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_shapes;
    use crate::data::Instance;
    use crate::tensor::Shape4;

    fn example(labels: Vec<u8>, side: usize) -> TrainingExample {
        TrainingExample {
            image: Tensor::gaussian(Shape4::new(1, 3, side, side).unwrap(), 1.0, labels.len() as u64).unwrap(),
            mask: LabelMask::new(side, side, labels).unwrap(),
            stage: 1,
            sample_id: "x".into(),
            crop: BoxGeometry::new(0, 0, side, side).unwrap(),
        }
    }

    #[test]
    fn grid_counts_and_bounds() {
        let s = &synth_shapes(1, &[1], 3).unwrap()[0];
        let big = Sample {
            image: resize_bilinear(&s.image, 128, 128).unwrap(),
            mask: resize_nearest(&s.mask, 128, 128).unwrap(),
            ..s.clone()
        };
        let boxes = grid_proposals(&big, &[64], 32).unwrap();
        assert_eq!(boxes.len(), 9);
        assert!(boxes.iter().all(|b| b.fits(128, 128)));
        assert!(boxes.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn balancing_rule() {
        let mut ex = Vec::new();
        for i in 0..10 {
            ex.push(example(vec![1; 4], 2));
            if i < 1 {
                ex.push(example(vec![2; 4], 2));
            }
        }
        let n = ex.len();
        let out = balance_classes(ex.clone());
        assert_eq!(&out[..n], &ex[..]);
        let twos = out.iter().filter(|e| dominant_class(&e.mask) == Some(2)).count();
        assert_eq!(twos, 5);
        let single: Vec<_> = (0..3).map(|_| example(vec![1; 4], 2)).collect();
        assert_eq!(balance_classes(single.clone()), single);
    }

    #[test]
    fn augmentation_flip_involution_and_labels() {
        let mut labels = vec![0u8; 64];
        labels[9] = 2;
        labels[10] = 3;
        let ex = example(labels, 8);
        let once = augment(&ex, 8, 8, true, 5).unwrap();
        assert_eq!(augment(&once, 8, 8, true, 5).unwrap(), ex);
        let a = augment(&ex, 8, 11, false, 9).unwrap();
        assert_eq!(a, augment(&ex, 8, 11, false, 9).unwrap());
        assert!(a.mask.distinct().iter().all(|l| ex.mask.distinct().contains(l)));
    }

    #[test]
    fn stage1_masks_out_competitors() {
        let side = 20;
        let mut mask = LabelMask::filled(side, side, 0);
        let mut inst = Vec::new();
        for (class, x0) in [(1u8, 2usize), (2, 9)] {
            let mut px = Vec::new();
            for y in 5..15 {
                for x in x0..x0 + 9 {
                    px.push((y * side + x) as u32);
                    mask.set(y, x, class);
                }
            }
            inst.push(Instance {
                class,
                bbox: BoxGeometry::bounding(&px, side).unwrap(),
                pixels: px,
            });
        }
        let s = Sample {
            id: "s".into(),
            image: Tensor::zeros(Shape4::new(1, 3, side, side).unwrap()).unwrap(),
            mask,
            instances: inst,
        };
        let (ex, report) = make_stage1_examples(&[s], 16).unwrap();
        assert_eq!(ex.len(), 2);
        assert!(report.skipped.is_empty());
        assert_eq!(ex[0].mask.distinct(), vec![0, 1]);
        assert_eq!(ex[1].mask.distinct(), vec![0, 2]);
    }
}
