//! Overlay and activation images.

use anyhow::{bail, Result};
use deconvseg::{LabelMask, Tensor, IGNORE_LABEL};

/// Distinct color for class `c`; background is black.
pub fn palette(c: u8) -> [f32; 3] {
    if c == 0 {
        return [0.0, 0.0, 0.0];
    }
    // Bit-interleaved like the common segmentation colormap.
    let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
    let mut v = c;
    for j in 0..8 {
        r |= ((v & 1) << (7 - j)) as u8;
        g |= (((v >> 1) & 1) << (7 - j)) as u8;
        b |= (((v >> 2) & 1) << (7 - j)) as u8;
        v >>= 3;
        if v == 0 {
            break;
        }
    }
    [r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0]
}

/// Blends class colors over a `(1, 3, H, W)` image; ignore pixels keep
/// the image.
pub fn overlay(image: &Tensor<f32>, labels: &LabelMask, alpha: f32) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 || (s.h, s.w) != (labels.height(), labels.width()) {
        bail!("overlay needs one RGB image matching a {}x{} mask, got {s}", labels.width(), labels.height());
    }
    let mut out = image.clone();
    for (p, &l) in labels.labels().iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let col = palette(l);
        for (c, &k) in col.iter().enumerate() {
            let v = &mut out.plane_mut(0, c)[p];
            *v = (1.0 - alpha) * *v + alpha * k;
        }
    }
    Ok(out)
}

/// Index and 0-255 rendering of the channel with the largest L2 norm in
/// the first batch item.
pub fn strongest_channel(t: &Tensor<f32>) -> (usize, Vec<u8>) {
    let s = t.shape();
    let norm = |c: usize| t.plane(0, c).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    let best = (0..s.c).fold(0, |b, c| if norm(c) > norm(b) { c } else { b });
    let plane = t.plane(0, best);
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let pixels = plane
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    (best, pixels)
}
