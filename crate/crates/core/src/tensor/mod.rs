//! Dense 4-D tensors in `n x c x h x w` row-major layout.

mod io;
mod scalar;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_tensor, write_tensor, TENSOR_MAGIC, TENSOR_VERSION};
pub use scalar::{DType, Scalar};

/// Extents of a 4-D tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    /// Validated constructor: every extent must be at least 1 and the element
    /// count must fit in `usize`.
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape4 { n, c, h, w };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::shape("shape", format!("zero extent in {self}")));
        }
        self.checked_len()
            .map(|_| ())
            .ok_or_else(|| Error::shape("shape", format!("element count of {self} overflows")))
    }

    fn checked_len(&self) -> Option<usize> {
        self.n
            .checked_mul(self.c)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }

    /// Number of elements. Only meaningful on validated shapes.
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn index(&self, offset: usize) -> (usize, usize, usize, usize) {
        let w = offset % self.w;
        let rest = offset / self.w;
        let h = rest % self.h;
        let rest = rest / self.h;
        let c = rest % self.c;
        (rest / self.c, c, h, w)
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape4 { n, ..self }
    }

    /// Same batch and channels with new spatial extents.
    pub fn with_dims(self, h: usize, w: usize) -> Result<Self> {
        Shape4::new(self.n, self.c, h, w)
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Maximum with the flat source offset of the winning element. Ties go to
    /// the lowest linear index.
    MaxWithArgmax,
}

/// Result of [`Tensor::reduce`].
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction<T: Scalar> {
    pub values: Tensor<T>,
    /// Flat offsets into the reduced tensor, one per output element; only set
    /// for [`ReduceOp::MaxWithArgmax`].
    pub argmax: Option<Vec<usize>>,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &head)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape4) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape4, value: T) -> Result<Self> {
        shape.validate()?;
        Ok(Tensor {
            shape,
            data: vec![value; shape.len()],
        })
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::shape(
                "from_vec",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Zero-mean Gaussian samples, reproducible per seed.
    pub fn gaussian(shape: Shape4, stddev: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::gaussian_with(shape, stddev, &mut rng)
    }

    pub fn gaussian_with<R: rand::Rng + ?Sized>(
        shape: Shape4,
        stddev: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(stddev > 0.0 && stddev.is_finite()) {
            return Err(Error::Parameter(format!(
                "gaussian stddev must be positive, got {stddev}"
            )));
        }
        shape.validate()?;
        let data = (0..shape.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * stddev)
            })
            .collect();
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let o = self.shape.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// Contiguous `c x h x w` block of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Single `h x w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        shape.validate()?;
        if shape.len() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {shape} changes element count", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Stacks equally-shaped tensors along the batch axis.
    pub fn concat_batch(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("concat_batch", "no tensors"))?;
        let base = first.shape;
        let mut data = Vec::with_capacity(base.len() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (base.c, base.h, base.w) {
                return Err(Error::shape(
                    "concat_batch",
                    format!("{s} does not match {base}"),
                ));
            }
            data.extend_from_slice(&t.data);
            n += s.n;
        }
        Tensor::from_vec(base.with_n(n), data)
    }

    /// Copy of batch item `n` as a standalone tensor.
    pub fn batch_item(&self, n: usize) -> Tensor<T> {
        Tensor {
            shape: self.shape.with_n(1),
            data: self.item(n).to_vec(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn elementwise(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        self.check_same_shape(other, "elementwise")?;
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |a, b| a + b,
            BinaryOp::Sub => |a, b| a - b,
            BinaryOp::Mul => |a, b| a * b,
            BinaryOp::Max => |a, b| if b > a { b } else { a },
        };
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Mul)
    }

    pub fn maximum(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Max)
    }

    /// `self + alpha * x`.
    pub fn scale_add(&self, x: &Self, alpha: T) -> Result<Self> {
        let mut out = self.clone();
        out.scale_add_assign(x, alpha)?;
        Ok(out)
    }

    /// In-place `self += alpha * x`.
    pub fn scale_add_assign(&mut self, x: &Self, alpha: T) -> Result<()> {
        self.check_same_shape(x, "scale_add")?;
        for (a, &b) in self.data.iter_mut().zip(&x.data) {
            *a = b.mul_add(alpha, *a);
        }
        Ok(())
    }

    /// Inner product over all elements, accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Reduces over `axes` (0 = n, 1 = c, 2 = h, 3 = w); reduced extents
    /// become 1. Sums accumulate in `f64` in ascending offset order.
    pub fn reduce(&self, axes: &[usize], op: ReduceOp) -> Result<Reduction<T>> {
        let mut reduced = [false; 4];
        if axes.is_empty() {
            return Err(Error::Parameter("reduce needs at least one axis".into()));
        }
        for &a in axes {
            if a >= 4 {
                return Err(Error::Parameter(format!("invalid axis {a}")));
            }
            if reduced[a] {
                return Err(Error::Parameter(format!("axis {a} repeated")));
            }
            reduced[a] = true;
        }
        let dims = self.shape.dims();
        let mut out_dims = dims;
        for (d, r) in out_dims.iter_mut().zip(reduced) {
            if r {
                *d = 1;
            }
        }
        let out_shape = Shape4::new(out_dims[0], out_dims[1], out_dims[2], out_dims[3])?;
        let count: usize = dims
            .iter()
            .zip(reduced)
            .filter(|(_, r)| *r)
            .map(|(d, _)| *d)
            .product();

        let out_offset = |i: usize| {
            let (n, c, h, w) = self.shape.index(i);
            let idx = [n, c, h, w];
            let p: [usize; 4] = std::array::from_fn(|k| if reduced[k] { 0 } else { idx[k] });
            out_shape.offset(p[0], p[1], p[2], p[3])
        };

        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = vec![0.0f64; out_shape.len()];
                for (i, v) in self.data.iter().enumerate() {
                    acc[out_offset(i)] += v.as_f64();
                }
                let scale = if op == ReduceOp::Mean {
                    1.0 / count as f64
                } else {
                    1.0
                };
                let data = acc.into_iter().map(|s| T::of(s * scale)).collect();
                Ok(Reduction {
                    values: Tensor::from_vec(out_shape, data)?,
                    argmax: None,
                })
            }
            ReduceOp::MaxWithArgmax => {
                let mut best = vec![T::neg_infinity(); out_shape.len()];
                let mut arg = vec![usize::MAX; out_shape.len()];
                // Ascending scan with strict comparison keeps the lowest index on ties.
                for (i, &v) in self.data.iter().enumerate() {
                    let o = out_offset(i);
                    if arg[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        arg[o] = i;
                    }
                }
                Ok(Reduction {
                    values: Tensor::from_vec(out_shape, best)?,
                    argmax: Some(arg),
                })
            }
        }
    }

    /// Per-pixel channel argmax, returned as `n * h * w` class indices.
    pub fn argmax_channels(&self) -> Vec<usize> {
        let red = self
            .reduce(&[1], ReduceOp::MaxWithArgmax)
            .expect("channel axis is valid");
        red.argmax
            .expect("argmax requested")
            .into_iter()
            .map(|off| self.shape.index(off).1)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(Shape4::new(shape.0, shape.1, shape.2, shape.3).unwrap(), data).unwrap()
    }

    #[test]
    fn zeros_have_requested_size() {
        let z = Tensor::<f32>::zeros(Shape4::new(1, 1, 2, 2).unwrap()).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let z = Tensor::<f32>::zeros(Shape4::new(2, 3, 4, 4).unwrap()).unwrap();
        assert_eq!(z.len(), 96);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let out = Tensor::<f32>::zeros(Shape4::new(1, 21, 224, 224).unwrap()).unwrap();
        assert_eq!(out.len(), 21 * 224 * 224);
    }

    #[test]
    fn shape_rejects_zero_and_overflow() {
        assert!(Shape4::new(0, 1, 1, 1).is_err());
        assert!(Shape4::new(usize::MAX, 2, 2, 2).is_err());
        assert!(Tensor::<f32>::zeros(Shape4 { n: 1, c: 0, h: 1, w: 1 }).is_err());
    }

    #[test]
    fn gaussian_is_reproducible_and_centered() {
        let shape = Shape4::new(1, 1, 1000, 1000).unwrap();
        let a = Tensor::<f32>::gaussian(shape, 0.01, 7).unwrap();
        let b = Tensor::<f32>::gaussian(shape, 0.01, 7).unwrap();
        let c = Tensor::<f32>::gaussian(shape, 0.01, 8).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        let n = a.len() as f64;
        let mean = a.sum() / n;
        assert!(mean.abs() < 3.0 * 0.01 / n.sqrt(), "mean {mean}");
        assert!(Tensor::<f32>::gaussian(shape, 0.0, 1).is_err());
        assert!(Tensor::<f32>::gaussian(shape, -1.0, 1).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let a = t((1, 1, 1, 2), vec![1.0, 2.0]);
        let b = t((1, 1, 1, 2), vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let a = t((1, 1, 1, 2), vec![1.0, 5.0]);
        let b = t((1, 1, 1, 2), vec![4.0, 2.0]);
        assert_eq!(a.maximum(&b).unwrap().data(), &[4.0, 5.0]);
        let z = Tensor::zeros(a.shape()).unwrap();
        assert_eq!(a.mul(&z).unwrap(), z);
        let c = t((1, 1, 2, 1), vec![1.0, 5.0]);
        assert!(matches!(a.add(&c), Err(Error::Shape { .. })));
    }

    #[test]
    fn scale_add_cases() {
        let acc = t((1, 1, 1, 2), vec![1.0, 1.0]);
        let x = t((1, 1, 1, 2), vec![2.0, 2.0]);
        assert_eq!(acc.scale_add(&x, 0.5).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(acc.scale_add(&x, 0.0).unwrap(), acc);
        assert_eq!(acc.scale_add(&acc, -1.0).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn reduce_sum_mean() {
        let ones = Tensor::<f32>::full(Shape4::new(1, 1, 2, 2).unwrap(), 1.0).unwrap();
        let r = ones.reduce(&[0, 1, 2, 3], ReduceOp::Sum).unwrap();
        assert_eq!(r.values.data(), &[4.0]);
        let k = Tensor::<f32>::full(Shape4::new(2, 3, 4, 5).unwrap(), 2.5).unwrap();
        let r = k.reduce(&[2, 3], ReduceOp::Mean).unwrap();
        assert_eq!(r.values.shape(), Shape4::new(2, 3, 1, 1).unwrap());
        assert!(r.values.data().iter().all(|&v| v == 2.5));
        assert!(k.reduce(&[4], ReduceOp::Sum).is_err());
        assert!(k.reduce(&[1, 1], ReduceOp::Sum).is_err());
        assert!(k.reduce(&[], ReduceOp::Sum).is_err());
    }

    #[test]
    fn channel_argmax_matches_scan() {
        let x = Tensor::<f32>::gaussian(Shape4::new(2, 5, 3, 4).unwrap(), 1.0, 3).unwrap();
        let labels = x.argmax_channels();
        let s = x.shape();
        let mut i = 0;
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let mut best = 0;
                    for c in 1..s.c {
                        if x.at(n, c, h, w) > x.at(n, best, h, w) {
                            best = c;
                        }
                    }
                    assert_eq!(labels[i], best);
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let x = t((1, 3, 1, 1), vec![2.0, 2.0, 1.0]);
        assert_eq!(x.argmax_channels(), vec![0]);
    }

    #[test]
    fn reduce_sum_matches_naive_accumulation() {
        let x = Tensor::<f32>::gaussian(Shape4::new(1, 1, 1000, 1000).unwrap(), 1.0, 11).unwrap();
        let mut naive = 0.0f64;
        for &v in x.data() {
            naive += v as f64;
        }
        let r = x.reduce(&[0, 1, 2, 3], ReduceOp::Sum).unwrap().values.data()[0] as f64;
        assert!((r - naive).abs() <= 1e-6 * naive.abs().max(1.0));
    }

    proptest! {
        #[test]
        fn index_offset_round_trip(n in 1usize..4, c in 1usize..5, h in 1usize..7, w in 1usize..7, pick in 0usize..10_000) {
            let s = Shape4::new(n, c, h, w).unwrap();
            let off = pick % s.len();
            let (a, b, y, x) = s.index(off);
            prop_assert_eq!(s.offset(a, b, y, x), off);
        }

        #[test]
        fn integer_add_is_commutative_and_associative(v in proptest::collection::vec(-1000i32..1000, 12)) {
            let s = Shape4::new(1, 1, 2, 2).unwrap();
            let f = |r: &[i32]| Tensor::<f32>::from_vec(s, r.iter().map(|&x| x as f32).collect()).unwrap();
            let (a, b, c) = (f(&v[0..4]), f(&v[4..8]), f(&v[8..12]));
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
            prop_assert_eq!(a.add(&b).unwrap().add(&c).unwrap(), a.add(&b.add(&c).unwrap()).unwrap());
        }
    }
}
