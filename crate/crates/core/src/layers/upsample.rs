use super::ConvParams;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor};

/// Fixed transposed-convolution kernel performing per-channel bilinear
/// upsampling by `factor`.
///
/// Kernel size is `2 * factor - factor % 2`, stride `factor`, and pad
/// `factor / 2`, so an `h x w` input maps to exactly `h*factor x w*factor`
/// with pixel centers aligned. Channels do not mix.
pub fn bilinear_upsample_kernel<T: Scalar>(factor: usize, channels: usize) -> Result<ConvParams<T>> {
    if factor < 1 {
        return Err(Error::Parameter("upsampling factor must be at least 1".into()));
    }
    if channels < 1 {
        return Err(Error::Parameter("upsampling needs at least one channel".into()));
    }
    let k = 2 * factor - factor % 2;
    let center = if k % 2 == 1 {
        (k - 1) as f64 / 2.0
    } else {
        factor as f64 - 0.5
    };
    let f = factor as f64;
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / f;
    let mut weights = Tensor::zeros(Shape4::new(channels, channels, k, k)?)?;
    for c in 0..channels {
        for y in 0..k {
            for x in 0..k {
                weights.set(c, c, y, x, T::of(tap(y) * tap(x)));
            }
        }
    }
    ConvParams::new(weights, vec![T::zero(); channels], factor, factor / 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::deconv2d_forward;

    #[test]
    fn factor_one_is_identity() {
        let p = bilinear_upsample_kernel::<f64>(1, 2).unwrap();
        assert_eq!(p.kernel(), (1, 1));
        let x = Tensor::<f64>::gaussian(Shape4::new(1, 2, 3, 4).unwrap(), 1.0, 3).unwrap();
        assert_eq!(deconv2d_forward(&x, &p).unwrap(), x);
        assert!(bilinear_upsample_kernel::<f64>(0, 2).is_err());
    }

    #[test]
    fn constant_stays_constant_away_from_border() {
        for factor in [2usize, 3, 4] {
            let p = bilinear_upsample_kernel::<f64>(factor, 1).unwrap();
            let x = Tensor::<f64>::full(Shape4::new(1, 1, 5, 5).unwrap(), 3.5).unwrap();
            let y = deconv2d_forward(&x, &p).unwrap();
            assert_eq!(y.shape(), Shape4::new(1, 1, 5 * factor, 5 * factor).unwrap());
            let band = factor;
            for r in band..5 * factor - band {
                for c in band..5 * factor - band {
                    assert!((y.at(0, 0, r, c) - 3.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_ramp_is_preserved_interiorly() {
        // Output pixel o sits at input coordinate (o + 0.5) / f - 0.5.
        for factor in [2usize, 3] {
            let f = factor as f64;
            let p = bilinear_upsample_kernel::<f64>(factor, 1).unwrap();
            let s = Shape4::new(1, 1, 6, 6).unwrap();
            let ramp = |y: f64, x: f64| 0.7 * y - 1.3 * x + 2.0;
            let mut x = Tensor::<f64>::zeros(s).unwrap();
            for r in 0..6 {
                for c in 0..6 {
                    x.set(0, 0, r, c, ramp(r as f64, c as f64));
                }
            }
            let y = deconv2d_forward(&x, &p).unwrap();
            for r in factor..5 * factor {
                for c in factor..5 * factor {
                    let expect = ramp((r as f64 + 0.5) / f - 0.5, (c as f64 + 0.5) / f - 0.5);
                    assert!((y.at(0, 0, r, c) - expect).abs() < 1e-6, "f{factor} ({r},{c})");
                }
            }
        }
    }
}
