//! Classification metric suite: accuracy, weighted/macro F1 from
//! one-vs-rest confusion tallies, and macro one-vs-rest AUC computed by the
//! Mann-Whitney rank statistic with midranks for ties.

use crate::error::{Error, Result};
use crate::training::N_CLASSES;

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub auc: f64,
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
    /// Classes skipped from the AUC macro average (absent positives or
    /// negatives in the truth).
    pub auc_skipped: Vec<usize>,
}

/// Midranks of `scores` (average rank across ties), 1-based.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest ranking AUC for class `k` via rank sums; `None` when the
/// class has no positives or no negatives.
fn auc_one_vs_rest(truth: &[usize], scores: &[f64], k: usize) -> Option<f64> {
    let n_pos = truth.iter().filter(|&&t| t == k).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum_pos: f64 = truth
        .iter()
        .zip(&ranks)
        .filter(|(&t, _)| t == k)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Full metric computation. `probs[i]` are the class probabilities of
/// sample `i` (each row on the simplex).
pub fn compute_metrics(truth: &[usize], pred: &[usize], probs: &[[f64; N_CLASSES]]) -> Result<Metrics> {
    let n = truth.len();
    if n == 0 || pred.len() != n || probs.len() != n {
        return Err(Error::contract(format!(
            "metric inputs disagree: truth {n}, pred {}, probs {}",
            pred.len(),
            probs.len()
        )));
    }
    if truth.iter().chain(pred.iter()).any(|&y| y >= N_CLASSES) {
        return Err(Error::contract("label out of range 0..3"));
    }
    for row in probs {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("probability row sums to {s}")));
        }
    }

    let mut confusion = [[0usize; N_CLASSES]; N_CLASSES];
    for (&t, &p) in truth.iter().zip(pred) {
        confusion[t][p] += 1;
    }
    let accuracy = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / n as f64;

    // one-vs-rest F1 per class; classes absent from the truth contribute 0
    let mut f1 = [0.0; N_CLASSES];
    let mut support = [0usize; N_CLASSES];
    for k in 0..N_CLASSES {
        let tp = confusion[k][k];
        let fp: usize = (0..N_CLASSES).filter(|&t| t != k).map(|t| confusion[t][k]).sum();
        let fn_: usize = (0..N_CLASSES).filter(|&p| p != k).map(|p| confusion[k][p]).sum();
        support[k] = tp + fn_;
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        f1[k] = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    let macro_f1 = f1.iter().sum::<f64>() / N_CLASSES as f64;
    let weighted_f1 = (0..N_CLASSES).map(|k| support[k] as f64 / n as f64 * f1[k]).sum();

    let mut auc_terms = Vec::new();
    let mut auc_skipped = Vec::new();
    for k in 0..N_CLASSES {
        let scores: Vec<f64> = probs.iter().map(|row| row[k]).collect();
        match auc_one_vs_rest(truth, &scores, k) {
            Some(a) => auc_terms.push(a),
            None => auc_skipped.push(k),
        }
    }
    if auc_terms.is_empty() {
        return Err(Error::contract("AUC undefined: only one class present in truth"));
    }
    let auc = auc_terms.iter().sum::<f64>() / auc_terms.len() as f64;

    Ok(Metrics { accuracy, weighted_f1, macro_f1, auc, confusion, auc_skipped })
}
