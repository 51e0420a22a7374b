//! Evaluation metrics: top-1 accuracy, Damerau-Levenshtein edit distance,
//! ED@Z over K candidates, and procedure-planning SR / mAcc / mIoU.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of positions where `preds[i] == gts[i]`.
pub fn top1_accuracy<T: PartialEq>(preds: &[T], gts: &[T]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch(preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Err(Error::Empty);
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unrestricted Damerau-Levenshtein distance (insertions, deletions,
/// substitutions and transpositions of adjacent symbols, where transposed
/// symbols may be edited again), via the Lowrance-Wagner recurrence.
pub fn damerau_levenshtein<T: Eq + Hash>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    let inf = n + m;
    // d is (n+2) x (m+2); row/col 0 hold the sentinel.
    let w = m + 2;
    let mut d = vec![0usize; (n + 2) * w];
    d[0] = inf;
    for i in 0..=n {
        d[(i + 1) * w] = inf;
        d[(i + 1) * w + 1] = i;
    }
    for j in 0..=m {
        d[j + 1] = inf;
        d[w + j + 1] = j;
    }
    let mut last_row: HashMap<&T, usize> = HashMap::new();
    for i in 1..=n {
        let mut last_match_col = 0;
        for j in 1..=m {
            let i1 = *last_row.get(&b[j - 1]).unwrap_or(&0);
            let j1 = last_match_col;
            let cost = if a[i - 1] == b[j - 1] {
                last_match_col = j;
                0
            } else {
                1
            };
            let sub = d[i * w + j] + cost;
            let ins = d[(i + 1) * w + j] + 1;
            let del = d[i * w + j + 1] + 1;
            let trans = d[i1 * w + j1] + (i - i1 - 1) + 1 + (j - j1 - 1);
            d[(i + 1) * w + j + 1] = sub.min(ins).min(del).min(trans);
        }
        last_row.insert(&a[i - 1], i);
    }
    d[(n + 1) * w + m + 1]
}

/// Ground truth and `K` candidate sequences of length `Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord<T> {
    pub ground_truth: Vec<T>,
    pub candidates: Vec<Vec<T>>,
}

impl<T> PredictionRecord<T> {
    pub fn validate(&self) -> Result<()> {
        let z = self.ground_truth.len();
        if z == 0 || self.candidates.is_empty() {
            return Err(Error::InvariantViolation("record needs Z >= 1 and K >= 1".into()));
        }
        if let Some(c) = self.candidates.iter().find(|c| c.len() != z) {
            return Err(Error::InvariantViolation(format!(
                "candidate of length {} for Z = {z}",
                c.len()
            )));
        }
        Ok(())
    }
}

/// Minimum over candidates of the edit distance to ground truth, divided by `Z`.
pub fn ed_at_z<T: Eq + Hash>(record: &PredictionRecord<T>) -> Result<f64> {
    record.validate()?;
    let best = record
        .candidates
        .iter()
        .map(|c| damerau_levenshtein(c, &record.ground_truth))
        .min()
        .unwrap_or(0);
    Ok(best as f64 / record.ground_truth.len() as f64)
}

/// Mean ED@Z over a set of records.
pub fn mean_ed_at_z<T: Eq + Hash>(records: &[PredictionRecord<T>]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty);
    }
    let total: f64 = records.iter().map(ed_at_z).sum::<Result<f64>>()?;
    Ok(total / records.len() as f64)
}

/// Procedure-planning scores, each in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningScores {
    pub success_rate: f64,
    pub mean_accuracy: f64,
    pub mean_iou: f64,
}

/// SR: exact sequence matches; mAcc: position-wise matches pooled over all
/// samples; mIoU: per-sample IoU of the label sets, averaged.
pub fn planning_metrics<T: Eq + Hash>(preds: &[Vec<T>], gts: &[Vec<T>]) -> Result<PlanningScores> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} samples", preds.len(), gts.len())));
    }
    let horizon = gts.first().ok_or(Error::Empty)?.len();
    if horizon == 0 || preds.iter().chain(gts).any(|s| s.len() != horizon) {
        return Err(Error::ShapeMismatch("all sequences must share one non-zero horizon".into()));
    }
    let n = preds.len() as f64;
    let mut success = 0usize;
    let mut hits = 0usize;
    let mut iou_sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        if p == g {
            success += 1;
        }
        hits += p.iter().zip(g).filter(|(a, b)| a == b).count();
        let ps: HashSet<&T> = p.iter().collect();
        let gs: HashSet<&T> = g.iter().collect();
        iou_sum += ps.intersection(&gs).count() as f64 / ps.union(&gs).count() as f64;
    }
    Ok(PlanningScores {
        success_rate: 100.0 * success as f64 / n,
        mean_accuracy: 100.0 * hits as f64 / (n * horizon as f64),
        mean_iou: 100.0 * iou_sum / n,
    })
}
