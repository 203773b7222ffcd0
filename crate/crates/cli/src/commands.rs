//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use deconvseg::data::image_io::{read_index_png, read_rgb_png, write_gray_png, write_index_png, write_rgb_png};
use deconvseg::data::{
    grid_proposals, load_manifest, load_voc_style, read_proposals, resize_bilinear, synth_shapes_with,
    whole_image_examples, write_dataset, write_proposals, SynthSettings, MANIFEST_FILE, SYNTH_CLASSES,
    SYNTH_CLASS_NAMES,
};
use deconvseg::infer::{no_refine, segment_image};
use deconvseg::tensor::write_tensor;
use deconvseg::train::{build_curriculum, load_checkpoint, train_stage, StageOptions};
use deconvseg::{AggregationMode, BoxGeometry, ConfusionCounts, MetricsReport, Model, Sample, SegmentOptions, TrainState};
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;
use crate::render::{overlay, strongest_channel};
use crate::{DumpArgs, EvalArgs, PredictArgs, StageArg, SynthArgs, TrainArgs};

/// Invalid invocation; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    let n = a.count.unwrap_or(cfg.synth.count);
    if n == 0 {
        return Err(usage("synth needs a positive --count"));
    }
    let settings = SynthSettings {
        side: a.side.unwrap_or(cfg.synth.side),
        ..SynthSettings::default()
    };
    let samples = synth_shapes_with(n, &cfg.synth.classes, a.seed.unwrap_or(cfg.synth.seed), &settings)?;
    write_dataset(&a.out, &samples, SYNTH_CLASSES, &SYNTH_CLASS_NAMES)?;
    let proposals = samples
        .iter()
        .map(|s| Ok((s.id.clone(), grid_proposals(s, &cfg.curriculum.grid_scales, cfg.curriculum.grid_stride)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    write_proposals(a.out.join("proposals.ndjson"), &proposals)?;
    info!("wrote {n} images to {}", a.out.display());
    Ok(())
}

/// A manifest file, a directory holding one, or a bare VOC-style directory.
fn load_samples(path: &Path, classes: usize) -> Result<Vec<Sample>> {
    let samples = if path.is_file() {
        load_manifest(path)?.1
    } else if path.join(MANIFEST_FILE).is_file() {
        load_manifest(path.join(MANIFEST_FILE))?.1
    } else if path.is_dir() {
        load_voc_style(path, classes)?
    } else {
        bail!("dataset {} does not exist", path.display());
    };
    if let Some(s) = samples.iter().find(|s| s.mask.labels().iter().any(|&l| l as usize >= classes && l != 255)) {
        bail!("sample {} has labels outside the {classes} configured classes", s.id);
    }
    Ok(samples)
}

fn split_samples(cfg: &RunConfig, a: &TrainArgs) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let classes = cfg.network.classes;
    let train_path = a
        .data
        .clone()
        .or_else(|| cfg.data.train.clone())
        .ok_or_else(|| usage("no training data: pass --data or set data.train"))?;
    let mut train = load_samples(&train_path, classes)?;
    let val = match a.val.clone().or_else(|| cfg.data.val.clone()) {
        Some(p) => load_samples(&p, classes)?,
        None => {
            if train.len() < 2 {
                bail!("need at least two samples to hold out validation data");
            }
            let keep = train.len() - (train.len() / 5).max(1);
            train.split_off(keep)
        }
    };
    info!("{} training and {} validation samples", train.len(), val.len());
    Ok((train, val))
}

pub fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let mut effective = cfg.clone();
    effective.out_dir = a.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    for (slot, arg) in [
        (&mut effective.data.train, &a.data),
        (&mut effective.data.val, &a.val),
        (&mut effective.data.proposals, &a.proposals),
    ] {
        if arg.is_some() {
            slot.clone_from(arg);
        }
    }
    let cfg = &effective;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("effective_config.json"), cfg.to_json()?)?;
    let (train, val) = split_samples(cfg, a)?;

    let resumed = a.resume.as_ref().map(load_checkpoint).transpose()?;
    let mean = resumed.as_ref().map(|c| c.mean).unwrap_or_default();
    if let Some(c) = &resumed {
        if c.model.num_classes() != cfg.network.classes {
            bail!(
                "checkpoint predicts {} classes, configuration has {}",
                c.model.num_classes(),
                cfg.network.classes
            );
        }
        info!("resuming stage {} at iteration {}", c.stage, c.state.iteration);
    }

    if a.baseline {
        let (mut model, mut state) = match resumed {
            Some(c) => (c.model, c.state),
            None => (Model::new(cfg.baseline_config()?, cfg.model_seed)?, TrainState::new(&cfg.optimizer)),
        };
        let side = model.input_side();
        let ex = whole_image_examples(&train, side)?;
        let vex = whole_image_examples(&val, side)?;
        let optim = deconvseg::OptimConfig {
            max_iters: a.iters.unwrap_or(cfg.stages.baseline_iters),
            ..cfg.optimizer.clone()
        };
        let opts = StageOptions {
            mean,
            out_dir: Some(out.join("baseline")),
            ..StageOptions::new(0)
        };
        let o = train_stage(&mut model, &mut state, &ex, &vex, &optim, &opts)?;
        info!("baseline done at iteration {}, best validation mIoU {:?}", state.iteration, o.best_score);
        return Ok(());
    }

    let (mut model, mut state, mut current) = match resumed {
        Some(c) => (c.model, c.state, Some(c.stage)),
        None => (Model::new(cfg.network_config()?, cfg.model_seed)?, TrainState::new(&cfg.optimizer), None),
    };
    let proposals = match a.proposals.clone().or_else(|| cfg.data.proposals.clone()) {
        Some(p) => Some(read_proposals(p)?),
        None => None,
    };
    let settings = deconvseg::train::CurriculumSettings {
        side: model.input_side(),
        ..cfg.curriculum.clone()
    };
    let cur = build_curriculum(&train, &val, proposals.as_ref(), &settings)?;
    info!(
        "curriculum: {} + {} stage-1, {} + {} stage-2 examples, {} instances skipped",
        cur.stage1_train.len(),
        cur.stage1_val.len(),
        cur.stage2_train.len(),
        cur.stage2_val.len(),
        cur.skipped.skipped.len()
    );
    let stages: &[u8] = match a.stage {
        StageArg::One => &[1],
        StageArg::Two => &[2],
        StageArg::Both => &[1, 2],
    };
    for &stage in stages {
        if current.is_some_and(|c| c > stage) {
            warn!("checkpoint is past stage {stage}; skipping it");
            continue;
        }
        if current.is_some_and(|c| c != stage) {
            state = state.next_stage(&cfg.optimizer);
        }
        current = Some(stage);
        let (ex, vex, budget) = match stage {
            1 => (&cur.stage1_train, &cur.stage1_val, cfg.stages.stage1_iters),
            _ => (&cur.stage2_train, &cur.stage2_val, cfg.stages.stage2_iters),
        };
        let optim = deconvseg::OptimConfig {
            max_iters: a.iters.unwrap_or(budget),
            ..cfg.optimizer.clone()
        };
        let opts = StageOptions {
            mean,
            out_dir: Some(out.clone()),
            ..StageOptions::new(stage)
        };
        let o = train_stage(&mut model, &mut state, ex, vex, &optim, &opts)?;
        info!(
            "stage {stage} done at iteration {}, loss {:.4} -> {:.4}, best validation mIoU {:?}",
            state.iteration, o.first_loss, o.last_loss, o.best_score
        );
    }
    Ok(())
}

fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn input_images(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if path.is_dir() {
        let m = png_files(path)?;
        if m.is_empty() {
            bail!("no PNG images in {}", path.display());
        }
        Ok(m)
    } else if path.is_file() {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        Ok(BTreeMap::from([(id, path.to_path_buf())]))
    } else {
        bail!("image {} does not exist", path.display())
    }
}

pub fn predict(cfg: &RunConfig, a: &PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let baseline = match &a.ensemble {
        Some(p) => {
            if !p.is_file() {
                bail!("ensemble baseline checkpoint {} not found", p.display());
            }
            let b = load_checkpoint(p)?.model;
            if b.num_classes() != ck.model.num_classes() {
                bail!("baseline predicts {} classes, model {}", b.num_classes(), ck.model.num_classes());
            }
            Some(b)
        }
        None => None,
    };
    let mode: AggregationMode = match &a.mode {
        Some(m) => m.parse()?,
        None => cfg.inference.mode,
    };
    let top_k = a.top_k.unwrap_or(cfg.inference.top_k);
    if top_k == 0 {
        return Err(usage("--top-k must be positive"));
    }
    let opts = SegmentOptions {
        mode,
        top_k,
        grid_scales: cfg.inference.grid_scales.clone(),
        grid_stride: cfg.inference.grid_stride,
        mean: ck.mean,
        refine: no_refine,
    };
    let proposals: BTreeMap<String, Vec<BoxGeometry>> = match &a.proposals {
        Some(p) => read_proposals(p)?,
        None => BTreeMap::new(),
    };
    let dirs = ["labels", "overlay", "provenance", "probs"].map(|d| a.out.join(d));
    for d in &dirs {
        fs::create_dir_all(d)?;
    }
    for (id, path) in input_images(&a.image)? {
        let image = read_rgb_png(&path)?;
        let boxes = proposals.get(&id).map(Vec::as_slice);
        if a.proposals.is_some() && boxes.is_none() {
            warn!("no proposals for {id}; using the grid");
        }
        let r = segment_image(&ck.model, baseline.as_ref(), &image, boxes, &opts)
            .with_context(|| format!("segmenting {}", path.display()))?;
        write_index_png(dirs[0].join(format!("{id}.png")), &r.label_mask)?;
        write_rgb_png(dirs[1].join(format!("{id}.png")), &overlay(&image, &r.label_mask, 0.5)?)?;
        fs::write(dirs[2].join(format!("{id}.json")), serde_json::to_string_pretty(&r.provenance)?)?;
        let mut f = std::io::BufWriter::new(fs::File::create(dirs[3].join(format!("{id}.dseg")))?);
        write_tensor(&mut f, &r.class_probs)?;
        info!("{id}: {} proposals, grid fallback {}", r.provenance.proposals.len(), r.provenance.grid_fallback);
    }
    Ok(())
}

#[derive(Serialize)]
struct ImageScore {
    id: String,
    mean_iou: Option<f64>,
    pixel_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    overall: MetricsReport,
    images: Vec<ImageScore>,
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let classes = a.classes.unwrap_or(cfg.network.classes);
    let pred = png_files(&a.pred)?;
    let gt = png_files(&a.gt)?;
    if let Some(id) = pred.keys().find(|k| !gt.contains_key(*k)) {
        bail!("prediction {id} has no ground truth in {}", a.gt.display());
    }
    if let Some(id) = gt.keys().find(|k| !pred.contains_key(*k)) {
        bail!("ground truth {id} has no prediction in {}", a.pred.display());
    }
    if pred.is_empty() {
        bail!("no label maps in {}", a.pred.display());
    }
    let mut total = ConfusionCounts::new(classes);
    let mut images = Vec::new();
    let mut rows = Vec::new();
    for (id, p) in &pred {
        let pm = read_index_png(p)?;
        let gm = read_index_png(&gt[id])?;
        let mut c = ConfusionCounts::new(classes);
        c.accumulate(&gm, &pm).with_context(|| format!("scoring {id}"))?;
        total.merge(&c)?;
        rows.push(match c.report() {
            Ok(r) => r.csv_row(id),
            Err(_) => format!("{id}{}", ",".repeat(3 + classes)),
        });
        images.push(ImageScore {
            id: id.clone(),
            mean_iou: c.mean_iou().ok(),
            pixel_accuracy: c.pixel_accuracy().ok(),
        });
    }
    let overall = total.report()?;
    fs::create_dir_all(&a.out)?;
    let mut csv = MetricsReport::csv_header(classes) + "\n" + &overall.csv_row("all") + "\n";
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    fs::write(a.out.join("metrics.csv"), csv)?;
    println!("mean IoU {:.4}, pixel accuracy {:.4}", overall.mean_iou, overall.pixel_accuracy);
    fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&EvalReport { overall, images })?)?;
    Ok(())
}

pub fn dump_activations(a: &DumpArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = &ck.model;
    let i = model.config().layer_index(&a.layer).ok_or_else(|| {
        usage(format!("unknown layer {:?}; valid layers: {}", a.layer, model.layer_names().join(", ")))
    })?;
    let side = model.input_side();
    let image = resize_bilinear(&read_rgb_png(&a.image)?, side, side)?;
    let (_, trace) = model.infer_traced(&ck.mean.apply(&image))?;
    let t = &trace.outputs[i];
    let (channel, pixels) = strongest_channel(t);
    let s = t.shape();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_gray_png(&a.out, s.w, s.h, &pixels).map_err(|e| anyhow!(e))?;
    info!("{}: channel {channel} of {} at {}x{}", a.layer, s.c, s.w, s.h);
    Ok(())
}
