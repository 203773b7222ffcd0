use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `d_out` where `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != d_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{} vs {}", x.shape(), d_out.shape()),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn row(v: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(Shape4::new(1, 1, 1, v.len()).unwrap(), v).unwrap()
    }

    #[test]
    fn forward_clamps_negatives() {
        assert_eq!(relu_forward(&row(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_masks() {
        let g = relu_backward(&row(vec![-1.0, 2.0]), &row(vec![5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0]);
        let g = relu_backward(&row(vec![0.0]), &row(vec![3.0])).unwrap();
        assert_eq!(g.data(), &[0.0]);
    }
}
