use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Flat evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nll_per_time: f64,
    pub weighted_f1: Option<f64>,
    pub weighted_roc_auc: Option<f64>,
    pub num_sequences: usize,
    pub num_events: usize,
    #[serde(skip)]
    pub per_sequence_loglik: Vec<f64>,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-class F1 averaged with weights proportional to class support in
/// `truth`. Classes without support do not count.
pub fn weighted_f1(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::invalid(
            "predictions",
            format!("{} predictions for {} labels", pred.len(), truth.len()),
        ));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= num_classes) {
        return Err(Error::invalid("predictions", format!("class {c} >= {num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        if support[c] == 0 {
            continue;
        }
        let denom = 2 * tp[c] + fp[c] + (support[c] - tp[c]);
        let f1 = 2.0 * tp[c] as f64 / denom as f64;
        total += f1 * support[c] as f64;
    }
    Ok(total / truth.len() as f64)
}

/// Rank-statistic AUC of one column; `None` unless both classes occur.
fn column_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks (1-based) over runs of tied scores.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| truth[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Per-mark ROC-AUC averaged with weights proportional to the number of
/// positives, over marks that have both positives and negatives.
pub fn weighted_roc_auc(scores: &[Vec<f64>], truth: &[Vec<bool>]) -> Result<f64> {
    if scores.is_empty() || scores.len() != truth.len() {
        return Err(Error::invalid(
            "scores",
            format!("{} score rows for {} label rows", scores.len(), truth.len()),
        ));
    }
    let m = scores[0].len();
    if scores.iter().any(|r| r.len() != m) || truth.iter().any(|r| r.len() != m) {
        return Err(Error::invalid("scores", "rows have different widths"));
    }
    let mut total = 0.0;
    let mut weight = 0usize;
    for j in 0..m {
        let col: Vec<f64> = scores.iter().map(|r| r[j]).collect();
        let lab: Vec<bool> = truth.iter().map(|r| r[j]).collect();
        if let Some(auc) = column_auc(&col, &lab) {
            let support = lab.iter().filter(|&&t| t).count();
            total += auc * support as f64;
            weight += support;
        }
    }
    if weight == 0 {
        return Err(Error::invalid("labels", "no mark has both positive and negative events"));
    }
    Ok(total / weight as f64)
}
