//! Mini-batch SGD with momentum, the validation-driven learning-rate
//! schedule, and the per-stage training loop.

mod curriculum;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, resize_side_for, PixelMean, TrainingExample};
use crate::error::{Error, Result};
use crate::layers::{cross_entropy_loss, Mode};
use crate::mask::{LabelMask, IGNORE_LABEL};
use crate::metrics::ConfusionCounts;
use crate::net::{save_container, Container, Gradients, Model};
use crate::tensor::{Scalar, Shape4, Tensor};

pub use curriculum::{build_curriculum, CurriculumData, CurriculumSettings};

/// Relative improvement a validation score needs to count as progress.
pub const IMPROVEMENT_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_drop_factor: f64,
    /// Validation rounds without improvement before the rate drops.
    pub patience: u32,
    pub val_every: u64,
    pub max_iters: u64,
    pub seed: u64,
    /// Random crop after resizing by 250/224, plus random mirroring.
    pub augment: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 64,
            lr_drop_factor: 10.0,
            patience: 3,
            val_every: 200,
            max_iters: 20_000,
            seed: 0,
            augment: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optimizer: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if self.batch_size == 0 || self.val_every == 0 || self.max_iters == 0 {
            return bad("batch_size, val_every and max_iters must be positive");
        }
        if !(self.lr_drop_factor > 1.0) {
            return bad("lr_drop_factor must exceed 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar = f32> {
    /// Last completed iteration; numbering continues across stages.
    pub iteration: u64,
    pub velocities: BTreeMap<String, Vec<T>>,
    pub best_score: Option<f64>,
    pub lr: f64,
    pub evals_without_improvement: u32,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &OptimConfig) -> Self {
        TrainState {
            iteration: 0,
            velocities: BTreeMap::new(),
            best_score: None,
            lr: cfg.lr,
            evals_without_improvement: 0,
        }
    }

    /// Fresh optimizer state that keeps the iteration count.
    pub fn next_stage(&self, cfg: &OptimConfig) -> Self {
        TrainState {
            iteration: self.iteration,
            ..TrainState::new(cfg)
        }
    }
}

/// `v = momentum * v - lr * (g + weight_decay * w); w += v` for every
/// learnable parameter. Nothing is updated if any gradient is non-finite.
pub fn sgd_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &Gradients<T>,
    state: &mut TrainState<T>,
    cfg: &OptimConfig,
) -> Result<()> {
    let fail = |message: String| Error::Training {
        iteration: state.iteration,
        message,
    };
    for (name, p) in model.parameters() {
        let g = grads.get(&name).ok_or_else(|| fail(format!("no gradient for {name}")))?;
        if g.len() != p.len() {
            return Err(fail(format!("gradient of {name} has {} values for {}", g.len(), p.len())));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(fail(format!("non-finite gradient in {name} at {i}")));
        }
    }
    let lr = T::of(state.lr);
    let mom = T::of(cfg.momentum);
    let wd = T::of(cfg.weight_decay);
    for slot in model.parameters_mut() {
        let g = &grads[&slot.name];
        let v = state
            .velocities
            .entry(slot.name)
            .or_insert_with(|| vec![T::zero(); g.len()]);
        for ((w, v), &g) in slot.data.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = mom * *v - lr * (g + wd * *w);
            *w += *v;
        }
    }
    Ok(())
}

/// Tracks the best validation score and divides the learning rate after
/// `patience` consecutive rounds without an improvement of more than the
/// margin. Returns whether the score improved.
pub fn lr_schedule<T: Scalar>(state: &mut TrainState<T>, val_score: f64, cfg: &OptimConfig) -> bool {
    let improved = match state.best_score {
        None => val_score.is_finite(),
        Some(best) => val_score > best + IMPROVEMENT_MARGIN,
    };
    if improved {
        state.best_score = Some(val_score);
        state.evals_without_improvement = 0;
    } else {
        state.evals_without_improvement += 1;
        if state.evals_without_improvement >= cfg.patience {
            state.lr /= cfg.lr_drop_factor;
            state.evals_without_improvement = 0;
            info!("learning rate dropped to {}", state.lr);
        }
    }
    improved
}

/// Pixel labels of each batch item by channel argmax.
pub fn predict_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<LabelMask> {
    let s = logits.shape();
    let labels = logits.argmax_channels();
    labels
        .chunks(s.plane())
        .map(|c| LabelMask::new(s.h, s.w, c.iter().map(|&l| l as u8).collect()).expect("nonempty"))
        .collect()
}

fn stack(images: &[&Tensor<f32>], mean: &PixelMean) -> Result<Tensor<f32>> {
    Ok(mean.apply(&Tensor::concat_batch(images)?))
}

/// Infer-mode confusion counts over examples, in batches.
pub fn validation_counts(
    model: &Model<f32>,
    examples: &[TrainingExample],
    mean: &PixelMean,
    batch: usize,
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::new(model.num_classes());
    for chunk in examples.chunks(batch.max(1)) {
        let x = stack(&chunk.iter().map(|e| &e.image).collect::<Vec<_>>(), mean)?;
        let preds = predict_labels(&model.infer(&x)?);
        for (e, p) in chunk.iter().zip(&preds) {
            counts.accumulate(&e.mask, p)?;
        }
    }
    Ok(counts)
}

/// `(pixel accuracy, mean IoU)` of infer-mode predictions.
pub fn evaluate_validation(model: &Model<f32>, examples: &[TrainingExample], mean: &PixelMean) -> Result<(f64, f64)> {
    let c = validation_counts(model, examples, mean, 16)?;
    Ok((c.pixel_accuracy()?, c.mean_iou()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
    pub pixel_acc: Option<f64>,
    pub mean_iou: Option<f64>,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "iteration,stage,loss,lr,pixel_acc,mean_iou";

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{},{},{}",
            self.iteration,
            self.stage,
            self.loss,
            self.lr,
            opt(self.pixel_acc),
            opt(self.mean_iou)
        )
    }
}

#[derive(Debug, Clone)]
pub struct StageOptions {
    pub stage: u8,
    pub mean: PixelMean,
    /// Directory for `stage<k>.dswc` and `metrics.csv`.
    pub out_dir: Option<PathBuf>,
    /// Replace the final model by the best validated one.
    pub keep_best: bool,
}

impl StageOptions {
    pub fn new(stage: u8) -> Self {
        StageOptions {
            stage,
            mean: PixelMean::default(),
            out_dir: None,
            keep_best: true,
        }
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(format!("stage{}.dswc", self.stage)))
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub log: Vec<MetricsRow>,
    pub best_score: Option<f64>,
    pub first_loss: f64,
    pub last_loss: f64,
}

fn seed_for(seed: u64, stage: u8, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((stage as u64) << 56));
    rng.set_stream(a.wrapping_mul(0x1_0000_0001).wrapping_add(b));
    rng.random()
}

/// Example indices of the mini-batch ending at `iteration`, drawn from
/// seeded per-epoch permutations.
fn batch_indices(n: usize, batch: usize, iteration: u64, seed: u64, stage: u8, cache: &mut (u64, Vec<usize>)) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    for j in 0..batch as u64 {
        let k = (iteration - 1) * batch as u64 + j;
        let epoch = k / n as u64;
        if cache.1.is_empty() || cache.0 != epoch {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_for(seed, stage, epoch, u64::MAX)));
            *cache = (epoch, perm);
        }
        out.push(cache.1[(k % n as u64) as usize]);
    }
    out
}

fn prepare_batch(
    examples: &[TrainingExample],
    idx: &[usize],
    cfg: &OptimConfig,
    stage: u8,
    iteration: u64,
) -> Result<Vec<TrainingExample>> {
    idx.par_iter()
        .enumerate()
        .map(|(j, &i)| {
            let e = &examples[i];
            if !cfg.augment {
                return Ok(e.clone());
            }
            let side = e.mask.height();
            let s = seed_for(cfg.seed, stage, iteration, j as u64);
            augment(e, side, resize_side_for(side), s & 1 == 1, s)
        })
        .collect()
}

/// Saves model, optimizer config and state as a checkpoint container.
pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    state: &TrainState<f32>,
    cfg: &OptimConfig,
    stage: u8,
    mean: &PixelMean,
) -> Result<()> {
    let extra = state
        .velocities
        .iter()
        .map(|(k, v)| Ok((format!("velocity/{k}"), Tensor::from_vec(Shape4::new(1, v.len(), 1, 1)?, v.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = serde_json::json!({
        "optim": cfg,
        "iteration": state.iteration,
        "stage": stage,
        "lr": state.lr,
        "best_score": state.best_score,
        "evals_without_improvement": state.evals_without_improvement,
        "pixel_mean": mean,
    });
    save_container(model, &extra, meta, path)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub state: TrainState<f32>,
    pub optim: OptimConfig,
    pub stage: u8,
    pub mean: PixelMean,
}

/// Loads a checkpoint; plain weight files load with default optimizer
/// settings at iteration 0.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let c = Container::<f32>::read(path)?;
    let model = c.model()?;
    let meta = &c.manifest.metadata;
    let optim: OptimConfig = match meta.get("optim") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => OptimConfig::default(),
    };
    let mean = match meta.get("pixel_mean") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => PixelMean::default(),
    };
    let state = TrainState {
        iteration: meta.get("iteration").and_then(|v| v.as_u64()).unwrap_or(0),
        velocities: c
            .with_prefix("velocity/")
            .into_iter()
            .map(|(k, t)| (k, t.data().to_vec()))
            .collect(),
        best_score: meta.get("best_score").and_then(|v| v.as_f64()),
        lr: meta.get("lr").and_then(|v| v.as_f64()).unwrap_or(optim.lr),
        evals_without_improvement: meta
            .get("evals_without_improvement")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as u32,
    };
    let stage = meta.get("stage").and_then(|v| v.as_u64()).unwrap_or(0) as u8;
    Ok(Checkpoint {
        model,
        state,
        optim,
        stage,
        mean,
    })
}

/// Runs `cfg.max_iters` iterations of seeded mini-batch SGD on `examples`,
/// validating every `cfg.val_every` iterations and at the end.
pub fn train_stage(
    model: &mut Model<f32>,
    state: &mut TrainState<f32>,
    examples: &[TrainingExample],
    val_examples: &[TrainingExample],
    cfg: &OptimConfig,
    opts: &StageOptions,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if examples.is_empty() || val_examples.is_empty() {
        return Err(Error::Training {
            iteration: state.iteration,
            message: "training and validation sets must be nonempty".into(),
        });
    }
    let side = model.input_side();
    if let Some(e) = examples.iter().chain(val_examples).find(|e| e.mask.height() != side || e.mask.width() != side) {
        return Err(Error::Training {
            iteration: state.iteration,
            message: format!("example from {} is not {side}x{side}", e.sample_id),
        });
    }
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let fresh = !path.exists();
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "{}", MetricsRow::CSV_HEADER)?;
            }
            Some(f)
        }
        None => None,
    };
    let batch = cfg.batch_size.min(examples.len());
    let start = state.iteration;
    let end = start + cfg.max_iters;
    let mut log = Vec::new();
    let mut best: Option<Model<f32>> = None;
    let mut perm_cache = (0, Vec::new());
    let (mut first_loss, mut last_loss) = (f64::NAN, f64::NAN);
    for iteration in start + 1..=end {
        state.iteration = iteration;
        let idx = batch_indices(examples.len(), batch, iteration, cfg.seed, opts.stage, &mut perm_cache);
        let items = prepare_batch(examples, &idx, cfg, opts.stage, iteration)?;
        let x = stack(&items.iter().map(|e| &e.image).collect::<Vec<_>>(), &opts.mean)?;
        let labels: Vec<u8> = items.iter().flat_map(|e| e.mask.labels().iter().copied()).collect();
        let (logits, trace) = model.forward(&x, Mode::Train, true)?;
        let (loss, d) = cross_entropy_loss(&logits, &labels, IGNORE_LABEL).map_err(|e| Error::Training {
            iteration,
            message: e.to_string(),
        })?;
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration,
                message: format!("loss diverged to {loss}"),
            });
        }
        if iteration == start + 1 {
            first_loss = loss;
        }
        last_loss = loss;
        let bp = model.backward(&trace.expect("trace requested"), &d)?;
        sgd_step(model, &bp.grads, state, cfg)?;
        let mut row = MetricsRow {
            iteration,
            stage: opts.stage,
            loss,
            lr: state.lr,
            pixel_acc: None,
            mean_iou: None,
        };
        if iteration % cfg.val_every == 0 || iteration == end {
            let (acc, miou) = evaluate_validation(model, val_examples, &opts.mean)?;
            row.pixel_acc = Some(acc);
            row.mean_iou = Some(miou);
            let improved = lr_schedule(state, miou, cfg);
            info!("stage {} iter {iteration}: loss {loss:.4} acc {acc:.4} miou {miou:.4} lr {}", opts.stage, state.lr);
            if improved {
                if opts.keep_best {
                    best = Some(model.clone());
                }
                if let Some(path) = opts.checkpoint_path() {
                    save_checkpoint(&path, model, state, cfg, opts.stage, &opts.mean)?;
                }
            }
        } else {
            debug!("stage {} iter {iteration}: loss {loss:.4}", opts.stage);
        }
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", row.csv())?;
        }
        log.push(row);
    }
    if let Some(b) = best {
        *model = b;
    }
    if let Some(path) = opts.checkpoint_path() {
        save_checkpoint(&path, model, state, cfg, opts.stage, &opts.mean)?;
    }
    Ok(StageOutcome {
        log,
        best_score: state.best_score,
        first_loss,
        last_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_deconvnet_for_input, LayerSpec, NetworkConfig};

    fn one_conv() -> Model<f64> {
        let cfg = NetworkConfig {
            layers: vec![LayerSpec::conv("c", 1, 1, 0, 2)],
            input_shape: Shape4::new(1, 1, 1, 1).unwrap(),
            num_classes: 2,
            scale: 1.0,
        };
        Model::new(cfg, 1).unwrap()
    }

    fn set_all(m: &mut Model<f64>, v: f64) {
        for s in m.parameters_mut() {
            s.data.fill(v);
        }
    }

    fn grads_of(m: &Model<f64>, g: f64) -> Gradients<f64> {
        m.parameters().into_iter().map(|(k, p)| (k, vec![g; p.len()])).collect()
    }

    #[test]
    fn plain_gradient_step() {
        let mut m = one_conv();
        set_all(&mut m, 1.0);
        let cfg = OptimConfig {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut st = TrainState::new(&cfg);
        let g = grads_of(&m, 0.5);
        sgd_step(&mut m, &g, &mut st, &cfg).unwrap();
        assert!(m.parameters().iter().all(|(_, p)| p.iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut m = one_conv();
        let before: Vec<Vec<f64>> = m.parameters().iter().map(|(_, p)| p.to_vec()).collect();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut st = TrainState::new(&cfg);
        let g = grads_of(&m, 0.0);
        sgd_step(&mut m, &g, &mut st, &cfg).unwrap();
        let after: Vec<Vec<f64>> = m.parameters().iter().map(|(_, p)| p.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut m = one_conv();
        let before = m.clone();
        let cfg = OptimConfig::default();
        let mut st = TrainState::new(&cfg);
        st.iteration = 12;
        let mut g = grads_of(&m, 0.1);
        g.values_mut().last().unwrap()[0] = f64::NAN;
        let err = sgd_step(&mut m, &g, &mut st, &cfg).unwrap_err();
        assert!(matches!(err, Error::Training { iteration: 12, .. }));
        assert_eq!(m.layers(), before.layers());
    }

    #[test]
    fn schedule_rules() {
        let cfg = OptimConfig {
            patience: 2,
            ..OptimConfig::default()
        };
        let mut st = TrainState::<f32>::new(&cfg);
        for s in [0.1, 0.2, 0.3] {
            assert!(lr_schedule(&mut st, s, &cfg));
        }
        assert_eq!(st.lr, 0.01);
        assert!(!lr_schedule(&mut st, 0.3 + 5e-5, &cfg));
        assert!(!lr_schedule(&mut st, 0.3, &cfg));
        assert!((st.lr - 0.001).abs() < 1e-15);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut cache = (0, Vec::new());
        let mut seen: Vec<usize> = (1..=5).flat_map(|it| batch_indices(10, 2, it, 3, 1, &mut cache)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut c2 = (0, Vec::new());
        assert_eq!(batch_indices(10, 2, 4, 3, 1, &mut c2), batch_indices(10, 2, 4, 3, 1, &mut cache));
    }

    #[test]
    fn stage_rejects_wrong_extent() {
        let mut m = Model::<f32>::new(build_deconvnet_for_input(2, 1.0 / 16.0, 32).unwrap(), 1).unwrap();
        let cfg = OptimConfig::default();
        let mut st = TrainState::new(&cfg);
        let ex = TrainingExample {
            image: Tensor::zeros(Shape4::new(1, 3, 16, 16).unwrap()).unwrap(),
            mask: LabelMask::filled(16, 16, 0),
            stage: 1,
            sample_id: "a".into(),
            crop: crate::data::BoxGeometry::new(0, 0, 16, 16).unwrap(),
        };
        let r = train_stage(&mut m, &mut st, &[ex.clone()], &[ex], &cfg, &StageOptions::new(1));
        assert!(matches!(r, Err(Error::Training { .. })));
    }
}
