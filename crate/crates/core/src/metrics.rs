//! Evaluation metrics: balanced accuracy, tile AUC, DICE, subtype masks,
//! the paired t-test and quartile summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::SlideRecord;
use crate::error::{invalid, Error, Result};

/// Mean per-class recall over the subtypes `1..=num_subtypes` that occur in
/// `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], num_subtypes: usize) -> Result<f64> {
    Ok(per_class_recall(preds, labels, num_subtypes)?.mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallSummary {
    pub mean: f64,
    /// Recall of subtype `i + 1`, `None` when it has no test slides.
    pub recalls: Vec<Option<f64>>,
}

pub fn per_class_recall(preds: &[usize], labels: &[usize], num_subtypes: usize) -> Result<RecallSummary> {
    if preds.is_empty() || preds.len() != labels.len() {
        return invalid("balanced accuracy needs equally sized non-empty inputs");
    }
    let mut tp = vec![0usize; num_subtypes + 1];
    let mut total = vec![0usize; num_subtypes + 1];
    for (&p, &y) in preds.iter().zip(labels) {
        if y == 0 || y > num_subtypes {
            return invalid(format!("label {y} outside 1..={num_subtypes}"));
        }
        total[y] += 1;
        tp[y] += usize::from(p == y);
    }
    let recalls: Vec<Option<f64>> =
        (1..=num_subtypes).map(|c| (total[c] > 0).then(|| tp[c] as f64 / total[c] as f64)).collect();
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    Ok(RecallSummary { mean: present.iter().sum::<f64>() / present.len() as f64, recalls })
}

/// Confusion counts over subtypes: `m[true - 1][pred - 1]`. Predictions of
/// class 0 are not counted.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_subtypes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; num_subtypes]; num_subtypes];
    for (&p, &y) in preds.iter().zip(labels) {
        if (1..=num_subtypes).contains(&y) && (1..=num_subtypes).contains(&p) {
            m[y - 1][p - 1] += 1;
        }
    }
    m
}

/// Rank-based (Mann–Whitney) AUC with midranks for ties.
pub fn tile_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return invalid("scores and mask lengths differ");
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative tiles".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("AUC scores contain NaN");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tied block i..=j shares the average rank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// A boolean mask over a slide grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl GridMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, cells: vec![false; height * width] }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    fn set(&mut self, row: u32, col: u32) {
        self.cells[row as usize * self.width + col as usize] = true;
    }

    /// Cells that hold a tile.
    pub fn occupancy(slide: &SlideRecord) -> Self {
        let mut m = Self::empty(slide.grid_h as usize, slide.grid_w as usize);
        for t in &slide.tiles {
            m.set(t.row, t.col);
        }
        m
    }

    /// Cells whose ground-truth label equals `target`.
    pub fn ground_truth(slide: &SlideRecord, target: usize) -> Self {
        let mut m = Self::empty(slide.grid_h as usize, slide.grid_w as usize);
        for t in slide.tiles.iter().filter(|t| t.gt_label == Some(target)) {
            m.set(t.row, t.col);
        }
        m
    }
}

/// `2|X ∩ Y| / (|X| + |Y|)`; two empty masks score 1.
pub fn dice(pred: &GridMask, truth: &GridMask) -> Result<f64> {
    if pred.height != truth.height || pred.width != truth.width || pred.cells.len() != truth.cells.len() {
        return invalid("DICE masks have different shapes");
    }
    let inter = pred.cells.iter().zip(&truth.cells).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + truth.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Cells whose tile was predicted as `target`. `labels` follows tile order.
pub fn subtype_mask(slide: &SlideRecord, labels: &[usize], target: usize) -> Result<GridMask> {
    if labels.len() != slide.tiles.len() {
        return invalid("one predicted label per tile is required");
    }
    let mut m = GridMask::empty(slide.grid_h as usize, slide.grid_w as usize);
    for (t, &l) in slide.tiles.iter().zip(labels) {
        if l == target {
            m.set(t.row, t.col);
        }
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    /// Differences had zero variance but a nonzero mean.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return invalid("paired t-test needs two samples of equal length >= 2");
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, degenerate: false }
        } else {
            TTest { t: mean.signum() * f64::INFINITY, p: 0.0, degenerate: true }
        });
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("dof >= 1");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, p, degenerate: false })
}

/// Linear-interpolation quantile (the common "type 7" definition) of an
/// unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Self { q1: quantile(values, 0.25)?, median: quantile(values, 0.5)?, q3: quantile(values, 0.75)? })
    }
}

/// Outcome of one (method, k, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub variant: String,
    pub base_quality: String,
    pub k: usize,
    pub seed: u64,
    pub bacc: f64,
    pub auc: Option<f64>,
    pub dice: Option<f64>,
    pub tile_accuracy: Option<f64>,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub num_test_slides: usize,
    pub pseudo_label_violations: usize,
}
