//! Matching-quality metrics over scored pairs: ROC sweep, false positive rate
//! at a target recall (FPR95), and rank-based average precision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PatchDataset;
use crate::losses::Label;
use crate::metricnet::Aggregation;
use crate::model::{LoopyModel, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no scored pairs")]
    Empty,
    #[error("metric needs both classes (positives {positives}, negatives {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("metric needs at least one positive pair")]
    NoPositives,
    #[error("target recall must lie in (0, 1], got {0}")]
    InvalidRecall(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub label: Label,
}

/// Distinct-score thresholds in descending order with cumulative counts at or
/// above each threshold.
fn threshold_sweep(sp: &[ScoredPair]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<&ScoredPair> = sp.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, p) in sorted.iter().enumerate() {
        if p.label.is_match() {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = sorted.get(i + 1).is_none_or(|n| n.score != p.score);
        if last_of_group {
            out.push((p.score, tp, fp));
        }
    }
    out
}

fn class_counts(sp: &[ScoredPair]) -> (usize, usize) {
    let pos = sp.iter().filter(|p| p.label.is_match()).count();
    (pos, sp.len() - pos)
}

fn require_both(sp: &[ScoredPair]) -> Result<(usize, usize), EvalError> {
    if sp.is_empty() {
        return Err(EvalError::Empty);
    }
    let (p, n) = class_counts(sp);
    if p == 0 || n == 0 {
        return Err(EvalError::SingleClass { positives: p, negatives: n });
    }
    Ok((p, n))
}

/// `(threshold, tpr, fpr)` for every distinct score, thresholds descending.
/// A pair is predicted positive when its score is at least the threshold.
pub fn roc_points(sp: &[ScoredPair]) -> Result<Vec<(f64, f64, f64)>, EvalError> {
    let (p, n) = require_both(sp)?;
    Ok(threshold_sweep(sp)
        .into_iter()
        .map(|(t, tp, fp)| (t, tp as f64 / p as f64, fp as f64 / n as f64))
        .collect())
}

/// FPR at the largest threshold whose recall reaches `target_recall`. Equal
/// scores cross a threshold together.
pub fn fpr_at_recall(sp: &[ScoredPair], target_recall: f64) -> Result<f64, EvalError> {
    if !(target_recall > 0.0 && target_recall <= 1.0) {
        return Err(EvalError::InvalidRecall(target_recall));
    }
    let (p, n) = require_both(sp)?;
    for (_, tp, fp) in threshold_sweep(sp) {
        if tp as f64 / p as f64 >= target_recall {
            return Ok(fp as f64 / n as f64);
        }
    }
    unreachable!("the lowest threshold admits every positive")
}

pub fn fpr95(sp: &[ScoredPair]) -> Result<f64, EvalError> {
    fpr_at_recall(sp, 0.95)
}

/// Non-interpolated average precision: mean of precision@k over the ranks k of
/// the positives, scores descending, ties kept in input order.
pub fn mean_average_precision(sp: &[ScoredPair]) -> Result<f64, EvalError> {
    let (p, _) = class_counts(sp);
    if p == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..sp.len()).collect();
    order.sort_by(|&a, &b| sp[b].score.total_cmp(&sp[a].score));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if sp[i].label.is_match() {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / p as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fpr95: f64,
    pub map: f64,
    pub num_pos: usize,
    pub num_neg: usize,
    /// `[threshold, tpr, fpr]` triples, thresholds descending.
    pub roc: Vec<[f64; 3]>,
}

impl MetricsReport {
    pub fn from_scores(sp: &[ScoredPair]) -> Result<Self, EvalError> {
        let (num_pos, num_neg) = require_both(sp)?;
        Ok(Self {
            fpr95: fpr95(sp)?,
            map: mean_average_precision(sp)?,
            num_pos,
            num_neg,
            roc: roc_points(sp)?.into_iter().map(|(t, a, b)| [t, a, b]).collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

/// Scores every pair of `ds` with `model` and `aggregation`.
pub fn score_dataset(model: &LoopyModel, ds: &PatchDataset, aggregation: Aggregation) -> Result<Vec<ScoredPair>, EvalError> {
    (0..ds.pairs.len())
        .map(|i| {
            let p = ds.pair(i);
            let (score, _) = model.match_pair(&p.a, &p.b, aggregation)?;
            Ok(ScoredPair { score, label: p.label })
        })
        .collect()
}

pub fn evaluate(model: &LoopyModel, ds: &PatchDataset, aggregation: Aggregation) -> Result<MetricsReport, EvalError> {
    MetricsReport::from_scores(&score_dataset(model, ds, aggregation)?)
}
