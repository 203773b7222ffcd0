use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    balance_classes, grid_proposals, make_stage1_examples, make_stage2_examples, BoxGeometry, Sample, SkipReport,
    TrainingExample, DEFAULT_IOU_MIN,
};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumSettings {
    /// Network input side.
    pub side: usize,
    pub iou_min: f64,
    /// Grid used when a sample has no supplied proposals.
    pub grid_scales: Vec<usize>,
    pub grid_stride: usize,
    /// Best-scoring proposals per sample considered for stage 2.
    pub proposals_per_sample: usize,
    pub balance: bool,
}

impl Default for CurriculumSettings {
    fn default() -> Self {
        CurriculumSettings {
            side: 64,
            iou_min: DEFAULT_IOU_MIN,
            grid_scales: vec![24, 32, 48, 64],
            grid_stride: 8,
            proposals_per_sample: 50,
            balance: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CurriculumData {
    pub stage1_train: Vec<TrainingExample>,
    pub stage1_val: Vec<TrainingExample>,
    pub stage2_train: Vec<TrainingExample>,
    pub stage2_val: Vec<TrainingExample>,
    pub skipped: SkipReport,
}

fn proposals_for(
    samples: &[Sample],
    supplied: Option<&BTreeMap<String, Vec<BoxGeometry>>>,
    s: &CurriculumSettings,
) -> Result<BTreeMap<String, Vec<BoxGeometry>>> {
    samples
        .par_iter()
        .map(|smp| {
            let mut boxes = match supplied.and_then(|p| p.get(&smp.id)) {
                Some(b) => {
                    let mut b = b.clone();
                    b.sort_by(|a, c| c.score.total_cmp(&a.score));
                    b
                }
                None => grid_proposals(smp, &s.grid_scales, s.grid_stride)?,
            };
            boxes.truncate(s.proposals_per_sample);
            Ok((smp.id.clone(), boxes))
        })
        .collect()
}

/// Stage-1 and stage-2 example sets for a train/validation split.
pub fn build_curriculum(
    train: &[Sample],
    val: &[Sample],
    proposals: Option<&BTreeMap<String, Vec<BoxGeometry>>>,
    s: &CurriculumSettings,
) -> Result<CurriculumData> {
    let (mut stage1_train, mut skipped) = make_stage1_examples(train, s.side)?;
    let (stage1_val, more) = make_stage1_examples(val, s.side)?;
    skipped.skipped.extend(more.skipped);
    let mut stage2_train = make_stage2_examples(train, &proposals_for(train, proposals, s)?, s.iou_min, s.side)?;
    let stage2_val = make_stage2_examples(val, &proposals_for(val, proposals, s)?, s.iou_min, s.side)?;
    if s.balance {
        stage1_train = balance_classes(stage1_train);
        stage2_train = balance_classes(stage2_train);
    }
    Ok(CurriculumData {
        stage1_train,
        stage1_val,
        stage2_train,
        stage2_val,
        skipped,
    })
}
