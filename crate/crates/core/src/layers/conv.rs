//! Convolution and transposed convolution ("deconvolution").
//!
//! Both lower to GEMM through an im2col buffer. A single weight tensor of
//! shape `(a, b, kh, kw)` defines an adjoint pair: convolution maps `b`
//! channels to `a`, and the transposed convolution with the same tensor maps
//! `a` channels back to `b`.

use rayon::prelude::*;

use super::LayerGrads;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    /// `(a, b, kh, kw)`; see the module docs for which side is the input.
    pub weights: Tensor<T>,
    /// One entry per output channel of the layer using these params.
    pub bias: Vec<T>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Parameter("stride must be at least 1".into()));
        }
        Ok(ConvParams {
            weights,
            bias,
            stride,
            pad,
        })
    }

    /// All-zero parameters for a layer whose weights are `(a, b, k, k)`, with
    /// `bias_len` bias entries.
    pub fn zeros(a: usize, b: usize, k: usize, bias_len: usize, stride: usize, pad: usize) -> Result<Self> {
        let weights = Tensor::zeros(Shape4::new(a, b, k, k)?)?;
        Self::new(weights, vec![T::zero(); bias_len], stride, pad)
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weights.shape();
        (s.h, s.w)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn conv_output_shape(&self, input: Shape4) -> Result<Shape4> {
        let ws = self.weights.shape();
        if input.c != ws.c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weights expect {}", input.c, ws.c),
            ));
        }
        if self.bias.len() != ws.n {
            return Err(Error::shape(
                "conv2d",
                format!("{} biases for {} output channels", self.bias.len(), ws.n),
            ));
        }
        let out = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * self.pad;
            if padded < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} exceeds padded extent {padded}"),
                ));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Shape4::new(input.n, ws.n, out(input.h, ws.h)?, out(input.w, ws.w)?)
    }

    pub fn deconv_output_shape(&self, input: Shape4) -> Result<Shape4> {
        let ws = self.weights.shape();
        if input.c != ws.n {
            return Err(Error::shape(
                "deconv2d",
                format!("input has {} channels, weights expect {}", input.c, ws.n),
            ));
        }
        if self.bias.len() != ws.c {
            return Err(Error::shape(
                "deconv2d",
                format!("{} biases for {} output channels", self.bias.len(), ws.c),
            ));
        }
        let out = |len: usize, k: usize| -> Result<usize> {
            let full = (len - 1) * self.stride + k;
            if full <= 2 * self.pad {
                return Err(Error::shape(
                    "deconv2d",
                    format!("pad {} leaves no output for extent {len}", self.pad),
                ));
            }
            Ok(full - 2 * self.pad)
        };
        Shape4::new(input.n, ws.c, out(input.h, ws.h)?, out(input.w, ws.w)?)
    }

    fn geometry(&self, channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Geometry {
        let (kh, kw) = self.kernel();
        Geometry {
            channels,
            h,
            w,
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
            oh,
            ow,
        }
    }
}

/// Unfolds one `c x h x w` image into a `(c*kh*kw) x (oh*ow)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let ncols = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into the image.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let ncols = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        if b != T::zero() {
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
}

fn plane_sums<T: Scalar>(d: &Tensor<T>) -> Vec<T> {
    let s = d.shape();
    let mut acc = vec![0.0f64; s.c];
    for n in 0..s.n {
        for (c, a) in acc.iter_mut().enumerate() {
            *a += d.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    acc.into_iter().map(T::of).collect()
}

fn check_grad_shape<T: Scalar>(d_out: &Tensor<T>, expected: Shape4, op: &'static str) -> Result<()> {
    if d_out.shape() != expected {
        return Err(Error::shape(
            op,
            format!("output gradient {} but forward output {expected}", d_out.shape()),
        ));
    }
    Ok(())
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let os = p.conv_output_shape(xs)?;
    let g = p.geometry(xs.c, xs.h, xs.w, os.h, os.w);
    let (rows, ncols) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(os)?;
    let out_item = os.c * os.plane();
    let w = p.weights.data();
    out.data_mut()
        .par_chunks_mut(out_item)
        .enumerate()
        .for_each(|(n, dst)| {
            let item = x.item(n);
            let mut buf;
            let cols: &[T] = if g.is_pointwise() {
                item
            } else {
                buf = vec![T::zero(); rows * ncols];
                im2col(item, &g, &mut buf);
                &buf
            };
            T::gemm(
                os.c,
                rows,
                ncols,
                T::one(),
                w,
                (rows as isize, 1),
                cols,
                (ncols as isize, 1),
                T::zero(),
                dst,
                (ncols as isize, 1),
            );
            add_bias(dst, &p.bias, ncols);
        });
    Ok(out)
}

/// Gradients of a convolution. `d_params` holds `[d_weights, d_bias]`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    d_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let xs = x.shape();
    let os = p.conv_output_shape(xs)?;
    check_grad_shape(d_out, os, "conv2d_backward")?;
    let g = p.geometry(xs.c, xs.h, xs.w, os.h, os.w);
    let (rows, ncols) = (g.rows(), g.cols());
    let w = p.weights.data();
    let mut d_w = vec![T::zero(); p.weights.len()];
    let mut d_x = Tensor::zeros(xs)?;
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * ncols }];
    let mut d_cols = vec![T::zero(); rows * ncols];
    for n in 0..xs.n {
        let dy = d_out.item(n);
        let cols_ref: &[T] = if g.is_pointwise() {
            x.item(n)
        } else {
            im2col(x.item(n), &g, &mut cols);
            &cols
        };
        // dW += dY * cols^T, accumulated in batch order.
        T::gemm(
            os.c,
            ncols,
            rows,
            T::one(),
            dy,
            (ncols as isize, 1),
            cols_ref,
            (1, ncols as isize),
            T::one(),
            &mut d_w,
            (rows as isize, 1),
        );
        // dcols = W^T * dY
        let target: &mut [T] = if g.is_pointwise() {
            d_x.item_mut(n)
        } else {
            &mut d_cols
        };
        T::gemm(
            rows,
            os.c,
            ncols,
            T::one(),
            w,
            (1, rows as isize),
            dy,
            (ncols as isize, 1),
            T::zero(),
            target,
            (ncols as isize, 1),
        );
        if !g.is_pointwise() {
            col2im(&d_cols, &g, d_x.item_mut(n));
        }
    }
    Ok(LayerGrads {
        d_input: d_x,
        d_params: vec![d_w, plane_sums(d_out)],
    })
}

/// Transposed convolution: the exact adjoint of [`conv2d_forward`] with the
/// same weights, plus a bias on the `b` output channels.
pub fn deconv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let os = p.deconv_output_shape(xs)?;
    // The conv geometry runs from the (larger) deconv output to its input.
    let g = p.geometry(os.c, os.h, os.w, xs.h, xs.w);
    let (rows, ncols) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(os)?;
    let out_item = os.c * os.plane();
    let w = p.weights.data();
    out.data_mut()
        .par_chunks_mut(out_item)
        .enumerate()
        .for_each(|(n, dst)| {
            let item = x.item(n);
            if g.is_pointwise() {
                T::gemm(
                    rows,
                    xs.c,
                    ncols,
                    T::one(),
                    w,
                    (1, rows as isize),
                    item,
                    (ncols as isize, 1),
                    T::zero(),
                    dst,
                    (ncols as isize, 1),
                );
            } else {
                let mut cols = vec![T::zero(); rows * ncols];
                T::gemm(
                    rows,
                    xs.c,
                    ncols,
                    T::one(),
                    w,
                    (1, rows as isize),
                    item,
                    (ncols as isize, 1),
                    T::zero(),
                    &mut cols,
                    (ncols as isize, 1),
                );
                col2im(&cols, &g, dst);
            }
            add_bias(dst, &p.bias, os.plane());
        });
    Ok(out)
}

/// Gradients of a transposed convolution. `d_params` holds `[d_weights, d_bias]`.
pub fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    d_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let xs = x.shape();
    let os = p.deconv_output_shape(xs)?;
    check_grad_shape(d_out, os, "deconv2d_backward")?;
    let g = p.geometry(os.c, os.h, os.w, xs.h, xs.w);
    let (rows, ncols) = (g.rows(), g.cols());
    let w = p.weights.data();
    let mut d_w = vec![T::zero(); p.weights.len()];
    let mut d_x = Tensor::zeros(xs)?;
    let mut d_cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * ncols }];
    for n in 0..xs.n {
        let dcols: &[T] = if g.is_pointwise() {
            d_out.item(n)
        } else {
            im2col(d_out.item(n), &g, &mut d_cols);
            &d_cols
        };
        // dX = W * dcols
        T::gemm(
            xs.c,
            rows,
            ncols,
            T::one(),
            w,
            (rows as isize, 1),
            dcols,
            (ncols as isize, 1),
            T::zero(),
            d_x.item_mut(n),
            (ncols as isize, 1),
        );
        // dW += X * dcols^T
        T::gemm(
            xs.c,
            ncols,
            rows,
            T::one(),
            x.item(n),
            (ncols as isize, 1),
            dcols,
            (1, ncols as isize),
            T::one(),
            &mut d_w,
            (rows as isize, 1),
        );
    }
    Ok(LayerGrads {
        d_input: d_x,
        d_params: vec![d_w, plane_sums(d_out)],
    })
}
