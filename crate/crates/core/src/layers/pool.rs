//! 2x2 stride-2 max pooling with recorded switches, and the unpooling that
//! consumes them.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor};

pub const POOL_WINDOW: usize = 2;

/// Argmax location of every pooling window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchMap {
    /// Shape of the pooled output.
    pub shape: Shape4,
    /// Shape of the tensor that was pooled.
    pub input_shape: Shape4,
    /// Flat offset into the pre-pooling tensor, one per pooled element.
    pub indices: Vec<usize>,
}

impl SwitchMap {
    /// Checks that every offset lies inside its own pooling window.
    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.shape.len() {
            return Err(Error::Integrity(format!(
                "{} switches for pooled shape {}",
                self.indices.len(),
                self.shape
            )));
        }
        for (i, &off) in self.indices.iter().enumerate() {
            check_window(self.shape, self.input_shape, i, off)?;
        }
        Ok(())
    }
}

fn check_window(pooled: Shape4, input: Shape4, i: usize, off: usize) -> Result<()> {
    let (n, c, y, x) = pooled.index(i);
    if off >= input.len() {
        return Err(Error::Integrity(format!(
            "switch {off} outside input of {} elements",
            input.len()
        )));
    }
    let (sn, sc, sy, sx) = input.index(off);
    if sn != n || sc != c || sy / POOL_WINDOW != y || sx / POOL_WINDOW != x {
        return Err(Error::Integrity(format!(
            "switch for pooled ({n},{c},{y},{x}) points at ({sn},{sc},{sy},{sx})"
        )));
    }
    Ok(())
}

pub fn pooled_shape(input: Shape4) -> Result<Shape4> {
    if input.h % POOL_WINDOW != 0 || input.w % POOL_WINDOW != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial extents of {input} not divisible by {POOL_WINDOW}"),
        ));
    }
    Shape4::new(input.n, input.c, input.h / POOL_WINDOW, input.w / POOL_WINDOW)
}

pub fn maxpool2d<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, SwitchMap)> {
    let xs = x.shape();
    let os = pooled_shape(xs)?;
    let mut out = Vec::with_capacity(os.len());
    let mut indices = Vec::with_capacity(os.len());
    let data = x.data();
    for n in 0..os.n {
        for c in 0..os.c {
            let base = (n * xs.c + c) * xs.plane();
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best_off = base + 2 * oy * xs.w + 2 * ox;
                    let mut best = data[best_off];
                    // Window scanned in ascending offset order; strict `>` keeps
                    // the top-left-most element on ties.
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let off = base + (2 * oy + dy) * xs.w + 2 * ox + dx;
                        if data[off] > best {
                            best = data[off];
                            best_off = off;
                        }
                    }
                    out.push(best);
                    indices.push(best_off);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(os, out)?,
        SwitchMap {
            shape: os,
            input_shape: xs,
            indices,
        },
    ))
}

/// Routes pooled-output gradients back to the recorded argmax positions.
pub fn maxpool2d_backward<T: Scalar>(d_out: &Tensor<T>, s: &SwitchMap) -> Result<Tensor<T>> {
    if d_out.shape() != s.shape {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!("gradient {} vs switches {}", d_out.shape(), s.shape),
        ));
    }
    let mut d_x = Tensor::zeros(s.input_shape)?;
    let dx = d_x.data_mut();
    for (&off, &g) in s.indices.iter().zip(d_out.data()) {
        dx[off] += g;
    }
    Ok(d_x)
}

/// Places every value of `y` at its switch location in a zero tensor of
/// `out_shape`.
pub fn maxunpool2d<T: Scalar>(y: &Tensor<T>, s: &SwitchMap, out_shape: Shape4) -> Result<Tensor<T>> {
    if y.shape() != s.shape {
        return Err(Error::shape(
            "maxunpool2d",
            format!("input {} vs switches {}", y.shape(), s.shape),
        ));
    }
    let expected = Shape4::new(s.shape.n, s.shape.c, s.shape.h * POOL_WINDOW, s.shape.w * POOL_WINDOW)?;
    if out_shape != expected {
        return Err(Error::shape(
            "maxunpool2d",
            format!("output {out_shape} is not the pre-pooling shape {expected}"),
        ));
    }
    let mut out = Tensor::zeros(out_shape)?;
    let dst = out.data_mut();
    for (i, (&off, &v)) in s.indices.iter().zip(y.data()).enumerate() {
        check_window(s.shape, out_shape, i, off)?;
        dst[off] = v;
    }
    Ok(out)
}

/// Gathers the upstream gradient at the switch locations.
pub fn maxunpool2d_backward<T: Scalar>(d_out: &Tensor<T>, s: &SwitchMap) -> Result<Tensor<T>> {
    if d_out.shape() != s.input_shape {
        return Err(Error::shape(
            "maxunpool2d_backward",
            format!("gradient {} vs unpooled {}", d_out.shape(), s.input_shape),
        ));
    }
    let src = d_out.data();
    let data = s.indices.iter().map(|&off| src[off]).collect();
    Tensor::from_vec(s.shape, data)
}
