use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::TaskKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_label: Vec<LabelScore>,
    /// Unweighted mean of per-label F1; labels with no support score 0.
    pub macro_f1: f64,
    /// F1 from TP/FP/FN pooled over labels.
    pub micro_f1: f64,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Per-label, macro and micro F1. Multi-class inputs must be singleton sets.
pub fn f1_scores(
    predictions: &[BTreeSet<usize>],
    gold: &[BTreeSet<usize>],
    num_labels: usize,
    task: TaskKind,
) -> Result<F1Report> {
    if predictions.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold label sets",
            predictions.len(),
            gold.len()
        )));
    }
    if num_labels == 0 {
        return Err(Error::InvalidArgument("num_labels must be positive".into()));
    }
    let mut per_label = vec![LabelScore::default(); num_labels];
    for (i, (p, g)) in predictions.iter().zip(gold).enumerate() {
        if let Some(&l) = p.iter().chain(g).find(|&&l| l >= num_labels) {
            return Err(Error::InvalidArgument(format!("row {i}: label {l} >= {num_labels}")));
        }
        if task == TaskKind::MultiClass && (p.len() != 1 || g.len() != 1) {
            return Err(Error::InvalidArgument(format!("row {i}: multi-class rows need exactly one label")));
        }
        for &l in p.union(g) {
            let s = &mut per_label[l];
            match (p.contains(&l), g.contains(&l)) {
                (true, true) => s.tp += 1,
                (true, false) => s.fp += 1,
                _ => s.fn_ += 1,
            }
        }
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for s in &mut per_label {
        s.f1 = f1(s.tp, s.fp, s.fn_);
        tp += s.tp;
        fp += s.fp;
        fn_ += s.fn_;
    }
    let macro_f1 = per_label.iter().map(|s| s.f1).sum::<f64>() / num_labels as f64;
    Ok(F1Report {
        per_label,
        macro_f1,
        micro_f1: f1(tp, fp, fn_),
    })
}
