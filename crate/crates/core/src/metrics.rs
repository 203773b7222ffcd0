//! Confusion counting, per-class IoU, mean IoU and pixel accuracy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LabelMask, IGNORE_LABEL};

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    num_classes: usize,
    matrix: Vec<u64>,
    ignored: u64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            num_classes,
            matrix: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.matrix[gt * self.num_classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    /// Counted (non-ignored) pixels.
    pub fn total(&self) -> u64 {
        self.matrix.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &LabelMask, pred: &LabelMask) -> Result<()> {
        self.accumulate_labels(gt.labels(), pred.labels(), IGNORE_LABEL)
    }

    pub fn accumulate_labels(&mut self, gt: &[u8], pred: &[u8], ignore: u8) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Metric(format!("{} truth pixels vs {} predicted", gt.len(), pred.len())));
        }
        let c = self.num_classes;
        // Validate first so a bad pair leaves the counts untouched.
        for (&g, &p) in gt.iter().zip(pred) {
            if g != ignore && (g as usize >= c || p as usize >= c) {
                return Err(Error::Metric(format!("label pair ({g}, {p}) outside {c} classes")));
            }
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == ignore {
                self.ignored += 1;
            } else {
                self.matrix[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Metric("merging counts of different class counts".into()));
        }
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the class is absent
    /// from both truth and prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|g| self.get(g, k)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over defined classes, background included.
    pub fn mean_iou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::Metric("no class is defined".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Metric("no counted pixels".into()));
        }
        let correct: u64 = (0..self.num_classes).map(|k| self.get(k, k)).sum();
        Ok(correct as f64 / total as f64)
    }

    pub fn report(&self) -> Result<MetricsReport> {
        Ok(MetricsReport {
            per_class_iou: self.iou_per_class(),
            mean_iou: self.mean_iou()?,
            pixel_accuracy: self.pixel_accuracy()?,
            ignored_pixels: self.ignored,
        })
    }
}

/// Counts over many `(truth, prediction)` pairs.
pub fn confusion_over(num_classes: usize, pairs: &[(&LabelMask, &LabelMask)]) -> Result<ConfusionCounts> {
    pairs
        .par_iter()
        .map(|(g, p)| {
            if (g.height(), g.width()) != (p.height(), p.width()) {
                return Err(Error::Metric(format!(
                    "truth {}x{} vs prediction {}x{}",
                    g.width(),
                    g.height(),
                    p.width(),
                    p.height()
                )));
            }
            let mut c = ConfusionCounts::new(num_classes);
            c.accumulate(g, p)?;
            Ok(c)
        })
        .try_reduce(
            || ConfusionCounts::new(num_classes),
            |mut a, b| {
                a.merge(&b)?;
                Ok(a)
            },
        )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub ignored_pixels: u64,
}

impl MetricsReport {
    pub fn csv_header(num_classes: usize) -> String {
        let mut h = String::from("set,mean_iou,pixel_accuracy,ignored_pixels");
        for c in 0..num_classes {
            h.push_str(&format!(",iou_{c}"));
        }
        h
    }

    pub fn csv_row(&self, set: &str) -> String {
        let mut row = format!("{set},{:.6},{:.6},{}", self.mean_iou, self.pixel_accuracy, self.ignored_pixels);
        for v in &self.per_class_iou {
            match v {
                Some(v) => row.push_str(&format!(",{v:.6}")),
                None => row.push(','),
            }
        }
        row
    }
}
