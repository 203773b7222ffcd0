//! Per-channel batch normalization over `(n, h, w)`.

use serde::{Deserialize, Serialize};

use super::{LayerGrads, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Scalar = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: Mode,
    /// Set once the running statistics hold at least one batch.
    pub stats_recorded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSettings {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BatchNormSettings {
    fn default() -> Self {
        BatchNormSettings {
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize, settings: BatchNormSettings) -> Result<Self> {
        if !(settings.epsilon > 0.0) {
            return Err(Error::Parameter("batchnorm epsilon must be positive".into()));
        }
        if !(settings.momentum > 0.0 && settings.momentum <= 1.0) {
            return Err(Error::Parameter("batchnorm momentum must lie in (0, 1]".into()));
        }
        Ok(BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: settings.epsilon,
            momentum: settings.momentum,
            mode: Mode::Train,
            stats_recorded: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, x: &Tensor<T>, op: &'static str) -> Result<()> {
        if x.shape().c != self.channels() {
            return Err(Error::shape(
                op,
                format!("input {} for {} channels", x.shape(), self.channels()),
            ));
        }
        Ok(())
    }

    fn batch_statistics(&self, x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = x.shape();
        let count = s.n * s.plane();
        if count < 2 {
            return Err(Error::State(format!(
                "train-mode batchnorm needs at least 2 values per channel, got {count}"
            )));
        }
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for c in 0..s.c {
            let mut sum = 0.0;
            for n in 0..s.n {
                sum += x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let m = sum / count as f64;
            let mut sq = 0.0;
            for n in 0..s.n {
                sq += x
                    .plane(n, c)
                    .iter()
                    .map(|v| (v.as_f64() - m).powi(2))
                    .sum::<f64>();
            }
            mean[c] = m;
            var[c] = sq / count as f64;
        }
        Ok((mean, var))
    }

    fn inference_statistics(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if !self.stats_recorded {
            return Err(Error::State(
                "inference batchnorm used before any running statistics were recorded".into(),
            ));
        }
        Ok((
            self.running_mean.iter().map(|v| v.as_f64()).collect(),
            self.running_var.iter().map(|v| v.as_f64()).collect(),
        ))
    }
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    state: &BatchNormState<T>,
    mean: &[f64],
    var: &[f64],
) -> Result<Tensor<T>> {
    let s = x.shape();
    let mut out = x.clone();
    for c in 0..s.c {
        let inv = 1.0 / (var[c] + state.epsilon).sqrt();
        let scale = state.gamma[c].as_f64() * inv;
        let shift = state.beta[c].as_f64() - mean[c] * scale;
        for n in 0..s.n {
            for v in out.plane_mut(n, c) {
                *v = T::of(v.as_f64() * scale + shift);
            }
        }
    }
    Ok(out)
}

/// Batch mean and biased variance per channel, with the element count.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Normalizes `x` under an explicit mode without mutating `state`. In train
/// mode the batch statistics used are returned so the caller can fold them
/// into the running averages.
pub fn batchnorm_apply<T: Scalar>(
    x: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchStats>)> {
    state.check_input(x, "batchnorm_forward")?;
    match mode {
        Mode::Infer => {
            let (mean, var) = state.inference_statistics()?;
            Ok((normalize(x, state, &mean, &var)?, None))
        }
        Mode::Train => {
            let (mean, var) = state.batch_statistics(x)?;
            let out = normalize(x, state, &mean, &var)?;
            let s = x.shape();
            Ok((
                out,
                Some(BatchStats {
                    mean,
                    var,
                    count: s.n * s.plane(),
                }),
            ))
        }
    }
}

impl<T: Scalar> BatchNormState<T> {
    /// Exponential moving average update; the first recorded batch seeds the
    /// averages directly. Variance is stored unbiased.
    pub fn record(&mut self, stats: &BatchStats) {
        let unbiased = stats.count as f64 / (stats.count as f64 - 1.0);
        let m = self.momentum;
        for c in 0..self.channels() {
            let batch_var = stats.var[c] * unbiased;
            if self.stats_recorded {
                let rm = self.running_mean[c].as_f64();
                let rv = self.running_var[c].as_f64();
                self.running_mean[c] = T::of(m * rm + (1.0 - m) * stats.mean[c]);
                self.running_var[c] = T::of(m * rv + (1.0 - m) * batch_var);
            } else {
                self.running_mean[c] = T::of(stats.mean[c]);
                self.running_var[c] = T::of(batch_var);
            }
        }
        self.stats_recorded = true;
    }
}

/// Train mode normalizes with batch statistics and folds them into the
/// running averages; infer mode uses the running averages.
pub fn batchnorm_forward<T: Scalar>(x: &Tensor<T>, state: &mut BatchNormState<T>) -> Result<Tensor<T>> {
    let (out, stats) = batchnorm_apply(x, state, state.mode)?;
    if let Some(stats) = stats {
        state.record(&stats);
    }
    Ok(out)
}

/// Gradients of batch normalization under `state.mode`. `d_params` holds
/// `[d_gamma, d_beta]`.
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    state: &BatchNormState<T>,
    d_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    batchnorm_backward_in(x, state, state.mode, d_out)
}

/// Gradients under an explicit mode. In train mode the coupling through the
/// batch mean and variance is included.
pub fn batchnorm_backward_in<T: Scalar>(
    x: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
    d_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    state.check_input(x, "batchnorm_backward")?;
    if x.shape() != d_out.shape() {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("{} vs {}", x.shape(), d_out.shape()),
        ));
    }
    let s = x.shape();
    let (mean, var) = match mode {
        Mode::Infer => state.inference_statistics()?,
        Mode::Train => state.batch_statistics(x)?,
    };
    let count = (s.n * s.plane()) as f64;
    let mut d_x = Tensor::zeros(s)?;
    let mut d_gamma = vec![T::zero(); s.c];
    let mut d_beta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let inv = 1.0 / (var[c] + state.epsilon).sqrt();
        let gamma = state.gamma[c].as_f64();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..s.n {
            for (&xv, &g) in x.plane(n, c).iter().zip(d_out.plane(n, c)) {
                let xhat = (xv.as_f64() - mean[c]) * inv;
                sum_dy += g.as_f64();
                sum_dy_xhat += g.as_f64() * xhat;
            }
        }
        d_gamma[c] = T::of(sum_dy_xhat);
        d_beta[c] = T::of(sum_dy);
        for n in 0..s.n {
            let xs = x.plane(n, c);
            let gs = d_out.plane(n, c);
            let dst = d_x.plane_mut(n, c);
            for ((d, &xv), &g) in dst.iter_mut().zip(xs).zip(gs) {
                let g = g.as_f64();
                *d = T::of(match mode {
                    Mode::Infer => gamma * inv * g,
                    Mode::Train => {
                        let xhat = (xv.as_f64() - mean[c]) * inv;
                        gamma * inv * (g - sum_dy / count - xhat * sum_dy_xhat / count)
                    }
                });
            }
        }
    }
    Ok(LayerGrads {
        d_input: d_x,
        d_params: vec![d_gamma, d_beta],
    })
}
