//! Synthetic shapes: disks, squares and triangles on a textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{BoxGeometry, Instance, Sample};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::{Shape4, Tensor};

pub const DISK: u8 = 1;
pub const SQUARE: u8 = 2;
pub const TRIANGLE: u8 = 3;
/// Background plus the three shape classes.
pub const SYNTH_CLASSES: usize = 4;
pub const SYNTH_CLASS_NAMES: [&str; SYNTH_CLASSES] = ["background", "disk", "square", "triangle"];

const TINTS: [[f32; 3]; 3] = [[0.85, 0.25, 0.2], [0.2, 0.75, 0.3], [0.25, 0.3, 0.85]];
const MAX_SHAPES: usize = 3;
const PLACEMENT_ATTEMPTS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSettings {
    pub side: usize,
    /// Shape extent range as a fraction of the image side.
    pub min_extent: f64,
    pub max_extent: f64,
    pub color_jitter: f32,
    pub noise: f32,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            side: 96,
            min_extent: 0.2,
            max_extent: 0.42,
            color_jitter: 0.12,
            noise: 0.04,
        }
    }
}

fn rasterize(class: u8, x0: f64, y0: f64, size: f64, orient: u8, side: usize) -> Vec<u32> {
    let mut px = Vec::new();
    let lo_y = y0.floor().max(0.0) as usize;
    let lo_x = x0.floor().max(0.0) as usize;
    let hi_y = ((y0 + size).ceil() as usize).min(side);
    let hi_x = ((x0 + size).ceil() as usize).min(side);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            // Unit coordinates of the pixel center inside the shape's square.
            let u = (x as f64 + 0.5 - x0) / size;
            let v = (y as f64 + 0.5 - y0) / size;
            if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
                continue;
            }
            let inside = match class {
                DISK => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
                SQUARE => true,
                _ => {
                    let (a, b) = match orient {
                        0 => (u, v),
                        1 => (u, 1.0 - v),
                        2 => (v, u),
                        _ => (v, 1.0 - u),
                    };
                    (a - 0.5).abs() <= b / 2.0
                }
            };
            if inside {
                px.push((y * side + x) as u32);
            }
        }
    }
    px
}

fn background(rng: &mut ChaCha8Rng, s: &SynthSettings, data: &mut [f32]) {
    let side = s.side;
    let plane = side * side;
    let base: f32 = rng.random_range(0.4..0.6);
    let gx: f32 = rng.random_range(-0.12..0.12);
    let gy: f32 = rng.random_range(-0.12..0.12);
    let tint: [f32; 3] = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
    let freq: f32 = rng.random_range(0.15..0.45);
    let phase: f32 = rng.random_range(0.0..6.28);
    let noise = Normal::new(0.0, s.noise).unwrap();
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f32 / side as f32 - 0.5, y as f32 / side as f32 - 0.5);
            let stripes = 0.04 * ((x as f32 + y as f32) * freq + phase).sin();
            let v = base + gx * fx + gy * fy + stripes;
            for c in 0..3 {
                data[c * plane + y * side + x] = v + tint[c] + noise.sample(rng);
            }
        }
    }
}

fn one_image(id: String, rng: &mut ChaCha8Rng, classes: &[u8], s: &SynthSettings) -> Result<Sample> {
    let side = s.side;
    let plane = side * side;
    let mut image = Tensor::zeros(Shape4::new(1, 3, side, side)?)?;
    let mut mask = LabelMask::filled(side, side, 0);
    background(rng, s, image.data_mut());
    let wanted = rng.random_range(1..=MAX_SHAPES);
    let mut taken = vec![false; plane];
    let mut instances = Vec::new();
    let noise = Normal::new(0.0, s.noise).unwrap();
    for _ in 0..wanted {
        let class = classes[rng.random_range(0..classes.len())];
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = rng.random_range(s.min_extent..s.max_extent) * side as f64;
            let x0 = rng.random_range(1.0..(side as f64 - size - 1.0).max(1.5));
            let y0 = rng.random_range(1.0..(side as f64 - size - 1.0).max(1.5));
            let orient = rng.random_range(0..4u8);
            let pixels = rasterize(class, x0, y0, size, orient, side);
            // Shapes keep a one-pixel gap so they never touch.
            let clash = pixels.iter().any(|&p| {
                let (y, x) = (p as usize / side, p as usize % side);
                (y.saturating_sub(1)..(y + 2).min(side))
                    .any(|yy| (x.saturating_sub(1)..(x + 2).min(side)).any(|xx| taken[yy * side + xx]))
            });
            if pixels.len() < 16 || clash {
                continue;
            }
            let tint = TINTS[(class - 1) as usize];
            let color: Vec<f32> = tint
                .iter()
                .map(|&t| (t + rng.random_range(-s.color_jitter..s.color_jitter)).clamp(0.0, 1.0))
                .collect();
            for &p in &pixels {
                let p = p as usize;
                taken[p] = true;
                mask.labels_mut()[p] = class;
                for (c, &v) in color.iter().enumerate() {
                    image.data_mut()[c * plane + p] = v + noise.sample(rng);
                }
            }
            let bbox = BoxGeometry::bounding(&pixels, side).expect("nonempty shape");
            instances.push(Instance { class, bbox, pixels });
            break;
        }
    }
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    // Values are stored as they would be after an 8-bit round trip.
    for v in image.data_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }
    Ok(Sample {
        id,
        image,
        mask,
        instances,
    })
}

/// Generates `n` images of `settings.side` pixels with one to three
/// non-touching shapes drawn from `classes` (ids 1..=3). Deterministic per
/// seed regardless of thread count.
pub fn synth_shapes_with(n: usize, classes: &[u8], seed: u64, settings: &SynthSettings) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Data("synthetic dataset needs at least one image".into()));
    }
    if classes.is_empty() || classes.iter().any(|&c| !(DISK..=TRIANGLE).contains(&c)) {
        return Err(Error::Data(format!("shape classes must be drawn from 1..=3, got {classes:?}")));
    }
    if settings.side < 16 || !(0.0 < settings.min_extent && settings.min_extent < settings.max_extent && settings.max_extent < 0.9) {
        return Err(Error::Data("invalid synthetic settings".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            one_image(format!("synth-{i:05}"), &mut rng, classes, settings)
        })
        .collect()
}

pub fn synth_shapes(n: usize, classes: &[u8], seed: u64) -> Result<Vec<Sample>> {
    synth_shapes_with(n, classes, seed, &SynthSettings::default())
}
