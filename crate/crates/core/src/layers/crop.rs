use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor};

/// Top-left corner of a centered crop. Odd excess leaves the extra row or
/// column on the bottom/right.
fn crop_origin(from: Shape4, to: Shape4) -> (usize, usize) {
    ((from.h - to.h) / 2, (from.w - to.w) / 2)
}

fn check_target(input: Shape4, target: Shape4) -> Result<()> {
    if input.n != target.n || input.c != target.c || target.h > input.h || target.w > input.w {
        return Err(Error::shape(
            "crop_center",
            format!("cannot crop {input} to {target}"),
        ));
    }
    Ok(())
}

pub fn crop_center<T: Scalar>(x: &Tensor<T>, target: Shape4) -> Result<Tensor<T>> {
    let s = x.shape();
    check_target(s, target)?;
    let (top, left) = crop_origin(s, target);
    let mut out = Vec::with_capacity(target.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for y in 0..target.h {
                let row = (top + y) * s.w + left;
                out.extend_from_slice(&plane[row..row + target.w]);
            }
        }
    }
    Tensor::from_vec(target, out)
}

/// Adjoint of [`crop_center`]: zero-pads the gradient back to `input_shape`.
pub fn uncrop_backward<T: Scalar>(d_out: &Tensor<T>, input_shape: Shape4) -> Result<Tensor<T>> {
    let ts = d_out.shape();
    check_target(input_shape, ts)?;
    let (top, left) = crop_origin(input_shape, ts);
    let mut d_x = Tensor::zeros(input_shape)?;
    for n in 0..ts.n {
        for c in 0..ts.c {
            let src = d_out.plane(n, c).to_vec();
            let dst = d_x.plane_mut(n, c);
            for y in 0..ts.h {
                let row = (top + y) * input_shape.w + left;
                dst[row..row + ts.w].copy_from_slice(&src[y * ts.w..(y + 1) * ts.w]);
            }
        }
    }
    Ok(d_x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_to_four_keeps_middle() {
        let s = Shape4::new(1, 1, 6, 6).unwrap();
        let x = Tensor::<f32>::from_vec(s, (0..36).map(|v| v as f32).collect()).unwrap();
        let y = crop_center(&x, Shape4::new(1, 1, 4, 4).unwrap()).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(y.at(0, 0, r, c), x.at(0, 0, r + 1, c + 1));
            }
        }
        assert_eq!(crop_center(&x, s).unwrap(), x);
    }

    #[test]
    fn odd_excess_goes_bottom_right() {
        let s = Shape4::new(1, 1, 5, 5).unwrap();
        let x = Tensor::<f32>::from_vec(s, (0..25).map(|v| v as f32).collect()).unwrap();
        let y = crop_center(&x, Shape4::new(1, 1, 4, 4).unwrap()).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), x.at(0, 0, 0, 0));
        let y = crop_center(&x, Shape4::new(1, 1, 2, 2).unwrap()).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), x.at(0, 0, 1, 1));
    }

    #[test]
    fn larger_target_is_rejected() {
        let x = Tensor::<f32>::zeros(Shape4::new(1, 1, 3, 3).unwrap()).unwrap();
        assert!(crop_center(&x, Shape4::new(1, 1, 4, 3).unwrap()).is_err());
    }
}
