use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Channel-wise softmax at every pixel, max-subtracted.
pub fn softmax_per_pixel<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c < 2 {
        return Err(Error::Parameter(format!(
            "softmax needs at least 2 channels, got {}",
            s.c
        )));
    }
    let plane = s.plane();
    let mut out = x.clone();
    let mut buf = vec![0.0f64; s.c];
    for n in 0..s.n {
        let item = out.item_mut(n);
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = item[c * plane + p].as_f64();
                max = max.max(*b);
            }
            let mut total = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - max).exp();
                total += *b;
            }
            for (c, b) in buf.iter().enumerate() {
                item[c * plane + p] = T::of(b / total);
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of the softmax given its output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != d_out.shape() {
        return Err(Error::shape(
            "softmax_backward",
            format!("{} vs {}", y.shape(), d_out.shape()),
        ));
    }
    let s = y.shape();
    let plane = s.plane();
    let mut d_x = Tensor::zeros(s)?;
    for n in 0..s.n {
        let yi = y.item(n);
        let gi = d_out.item(n);
        let dst = d_x.item_mut(n);
        for p in 0..plane {
            let dot: f64 = (0..s.c)
                .map(|c| yi[c * plane + p].as_f64() * gi[c * plane + p].as_f64())
                .sum();
            for c in 0..s.c {
                let k = c * plane + p;
                dst[k] = T::of(yi[k].as_f64() * (gi[k].as_f64() - dot));
            }
        }
    }
    Ok(d_x)
}

/// Mean pixel-wise cross entropy of `logits` against `labels` (`n * h * w`
/// entries in batch-major, row-major order), skipping `ignore` pixels.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(softmax - onehot) / counted_pixels`.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    ignore: u8,
) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    if labels.len() != s.n * s.plane() {
        return Err(Error::shape(
            "cross_entropy_loss",
            format!("{} labels for logits {s}", labels.len()),
        ));
    }
    let plane = s.plane();
    let counted = labels.iter().filter(|&&l| l != ignore).count();
    if counted == 0 {
        return Err(Error::Loss("every pixel carries the ignore label".into()));
    }
    if let Some(&bad) = labels
        .iter()
        .find(|&&l| l != ignore && l as usize >= s.c)
    {
        return Err(Error::Loss(format!("label {bad} outside [0, {})", s.c)));
    }
    let norm = 1.0 / counted as f64;
    let mut grad = Tensor::zeros(s)?;
    let mut loss = 0.0;
    let mut buf = vec![0.0f64; s.c];
    for n in 0..s.n {
        let li = logits.item(n);
        let gi = grad.item_mut(n);
        for p in 0..plane {
            let label = labels[n * plane + p];
            if label == ignore {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = li[c * plane + p].as_f64();
                max = max.max(*b);
            }
            let log_total = buf.iter().map(|b| (b - max).exp()).sum::<f64>().ln() + max;
            loss -= buf[label as usize] - log_total;
            for (c, b) in buf.iter().enumerate() {
                let prob = (b - log_total).exp();
                let target = if c == label as usize { 1.0 } else { 0.0 };
                gi[c * plane + p] = T::of((prob - target) * norm);
            }
        }
    }
    Ok((loss * norm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn pixel(logits: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape4::new(1, logits.len(), 1, 1).unwrap(), logits).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax_per_pixel(&pixel(vec![1.0, 1.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax_per_pixel(&pixel(vec![0.0, 3f64.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
        assert!(softmax_per_pixel(&pixel(vec![1.0])).is_err());
    }

    #[test]
    fn softmax_channel_sums() {
        let x = Tensor::<f32>::gaussian(Shape4::new(2, 7, 6, 5).unwrap(), 4.0, 9).unwrap();
        let p = softmax_per_pixel(&x).unwrap();
        let sums = p.reduce(&[1], crate::tensor::ReduceOp::Sum).unwrap().values;
        assert!(sums.data().iter().all(|s| (s - 1.0).abs() < 1e-6));
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let uniform = Tensor::<f64>::zeros(Shape4::new(1, 21, 2, 2).unwrap()).unwrap();
        let (loss, _) = cross_entropy_loss(&uniform, &[0, 3, 20, 7], 255).unwrap();
        assert!((loss - 21f64.ln()).abs() < 1e-12);
        assert!((21f64.ln() - 3.0445).abs() < 1e-4);

        let confident = pixel(vec![-50.0, 50.0, -50.0]);
        let (loss, _) = cross_entropy_loss(&confident, &[1], 255).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn ignored_pixels_do_not_contribute() {
        let x = Tensor::<f64>::gaussian(Shape4::new(1, 3, 1, 2).unwrap(), 1.0, 1).unwrap();
        let (_, g) = cross_entropy_loss(&x, &[1, 255], 255).unwrap();
        for c in 0..3 {
            assert_eq!(g.at(0, c, 0, 1), 0.0);
        }
        assert!(matches!(cross_entropy_loss(&x, &[255, 255], 255), Err(Error::Loss(_))));
        assert!(cross_entropy_loss(&x, &[3, 0], 255).is_err());
    }
}
