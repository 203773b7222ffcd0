use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Context factor applied to proposal and instance boxes before cropping.
pub const BOX_EXTENSION: f64 = 1.2;

/// Pixel box, inclusive-exclusive, with an optional objectness score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    #[serde(default)]
    pub score: f64,
}

impl BoxGeometry {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        let b = BoxGeometry {
            x0,
            y0,
            x1,
            y1,
            score: 0.0,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Data(format!("empty box {self}")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Center in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn intersection(&self, other: &BoxGeometry) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn iou(&self, other: &BoxGeometry) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight box of flat pixel offsets in a `width`-wide grid.
    pub fn bounding(offsets: &[u32], width: usize) -> Option<Self> {
        let mut it = offsets.iter().map(|&o| (o as usize % width, o as usize / width));
        let (x, y) = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (x, y, x + 1, y + 1);
        for (x, y) in it {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        Some(BoxGeometry {
            x0,
            y0,
            x1,
            y1,
            score: 0.0,
        })
    }
}

impl std::fmt::Display for BoxGeometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Scales `b` about its center by `factor`, squares it to the longer side,
/// and clips it to the image. The score is carried over.
pub fn extend_box(b: &BoxGeometry, factor: f64, width: usize, height: usize) -> Result<BoxGeometry> {
    if b.x1 <= b.x0 + 1 || b.y1 <= b.y0 + 1 {
        return Err(Error::Data(format!("degenerate box {b}")));
    }
    if !(factor > 0.0) || width == 0 || height == 0 {
        return Err(Error::Data(format!("invalid extension of {b} by {factor}")));
    }
    let (cx, cy) = b.center();
    let half = b.width().max(b.height()) as f64 * factor / 2.0;
    let clip = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
    let out = BoxGeometry {
        x0: clip(cx - half, width),
        y0: clip(cy - half, height),
        x1: clip(cx + half, width),
        y1: clip(cy + half, height),
        score: b.score,
    };
    out.validate()?;
    Ok(out)
}

/// Bilinear resampling of every channel with pixel-center alignment and
/// edge clamping.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let mut out = Tensor::zeros(s.with_dims(out_h, out_w)?)?;
    if (out_h, out_w) == (s.h, s.w) {
        out.data_mut().copy_from_slice(x.data());
        return Ok(out);
    }
    let taps = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, s.h);
    let xs = taps(out_w, s.w);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let r0 = &src[y0 * s.w..(y0 + 1) * s.w];
                let r1 = &src[y1 * s.w..(y1 + 1) * s.w];
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = r0[x0].as_f64() * (1.0 - fx) + r0[x1].as_f64() * fx;
                    let bottom = r1[x0].as_f64() * (1.0 - fx) + r1[x1].as_f64() * fx;
                    dst[oy * out_w + ox] = T::of(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    Ok(out)
}

/// Copies the pixels of `b` out of every channel.
pub fn crop_tensor<T: Scalar>(x: &Tensor<T>, b: &BoxGeometry) -> Result<Tensor<T>> {
    let s = x.shape();
    if !b.fits(s.w, s.h) {
        return Err(Error::shape("crop_tensor", format!("box {b} outside {s}")));
    }
    let mut out = Tensor::zeros(s.with_dims(b.height(), b.width())?)?;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (r, y) in (b.y0..b.y1).enumerate() {
                dst[r * b.width()..(r + 1) * b.width()].copy_from_slice(&src[y * s.w + b.x0..y * s.w + b.x1]);
            }
        }
    }
    Ok(out)
}

/// Mirrors every plane left to right.
pub fn flip_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(s.w) {
        row.reverse();
    }
    out
}
