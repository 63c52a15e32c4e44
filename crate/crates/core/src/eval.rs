//! Per-visit Jaccard, F1 and PR-AUC.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::finetune::VisitPrediction;

pub const DEFAULT_THRESHOLD: f64 = 0.3;

/// Labels whose probability reaches `threshold`.
pub fn threshold(probs: &[f64], threshold: f64) -> Vec<usize> {
    probs.iter().enumerate().filter(|(_, &p)| p >= threshold).map(|(i, _)| i).collect()
}

fn overlap(truth: &[usize], pred: &[usize]) -> (usize, usize, usize) {
    let a: BTreeSet<_> = truth.iter().collect();
    let b: BTreeSet<_> = pred.iter().collect();
    (a.intersection(&b).count(), a.len(), b.len())
}

/// `|Y ∩ Ŷ| / |Y ∪ Ŷ|`; both empty counts as a perfect match.
pub fn visit_jaccard(truth: &[usize], pred: &[usize]) -> f64 {
    let (inter, t, p) = overlap(truth, pred);
    let union = t + p - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Harmonic mean of precision and recall; both empty counts as a perfect
/// match, any other empty side scores 0.
pub fn visit_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let (inter, t, p) = overlap(truth, pred);
    if t == 0 && p == 0 {
        return 1.0;
    }
    if inter == 0 {
        return 0.0;
    }
    let precision = inter as f64 / p as f64;
    let recall = inter as f64 / t as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Average precision of one ranking: `Σ (R_i − R_{i−1}) P_i` over distinct
/// descending thresholds, tied scores entering together. `None` without positives.
pub fn average_precision(truth: &[usize], probs: &[f64]) -> Option<f64> {
    let positives: BTreeSet<usize> = truth.iter().copied().filter(|&i| i < probs.len()).collect();
    if positives.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let n_pos = positives.len() as f64;
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let score = probs[order[i]];
        while i < order.len() && probs[order[i]] == score {
            tp += positives.contains(&order[i]) as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / n_pos;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(ap)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn jaccard(truth: &[Vec<usize>], pred: &[Vec<usize>]) -> f64 {
    mean(truth.iter().zip(pred).map(|(t, p)| visit_jaccard(t, p)))
}

pub fn avg_f1(truth: &[Vec<usize>], pred: &[Vec<usize>]) -> f64 {
    mean(truth.iter().zip(pred).map(|(t, p)| visit_f1(t, p)))
}

/// Mean average precision over visits with at least one positive, and the
/// number of visits skipped.
pub fn pr_auc(truth: &[Vec<usize>], probs: &[Vec<f64>]) -> (f64, usize) {
    let aps: Vec<Option<f64>> = truth.iter().zip(probs).map(|(t, p)| average_precision(t, p)).collect();
    let skipped = aps.iter().filter(|a| a.is_none()).count();
    (mean(aps.into_iter().flatten()), skipped)
}

/// Conventions recorded in every report.
pub const CONVENTIONS: [&str; 4] = [
    "jaccard: mean over visits t>=2; both-empty visit scores 1",
    "f1: per-visit F1 averaged over visits; both-empty scores 1, one side empty scores 0",
    "pr_auc: per-visit average precision (step-wise, tied scores grouped) averaged over visits with positives",
    "threshold: label predicted when probability >= threshold",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub jaccard: f64,
    pub f1: f64,
    pub pr_auc: f64,
    pub patients: usize,
    pub visits: usize,
    pub pr_auc_skipped_visits: usize,
    pub threshold: f64,
    pub config_fingerprint: String,
    pub seed: u64,
    pub conventions: Vec<String>,
}

impl MetricsReport {
    pub fn from_predictions(preds: &[VisitPrediction], thresh: f64, config_fingerprint: String, seed: u64) -> Self {
        let truth: Vec<Vec<usize>> = preds.iter().map(|p| p.truth.clone()).collect();
        let sets: Vec<Vec<usize>> = preds.iter().map(|p| threshold(&p.probs, thresh)).collect();
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
        let (pr, skipped) = pr_auc(&truth, &probs);
        let patients: BTreeSet<&str> = preds.iter().map(|p| p.pid.as_str()).collect();
        Self {
            jaccard: jaccard(&truth, &sets),
            f1: avg_f1(&truth, &sets),
            pr_auc: pr,
            patients: patients.len(),
            visits: preds.len(),
            pr_auc_skipped_visits: skipped,
            threshold: thresh,
            config_fingerprint,
            seed,
            conventions: CONVENTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub const CSV_HEADER: &'static str = "jaccard,f1,pr_auc,patients,visits,pr_auc_skipped_visits,threshold,config_fingerprint,seed";

    pub fn csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.jaccard,
            self.f1,
            self.pr_auc,
            self.patients,
            self.visits,
            self.pr_auc_skipped_visits,
            self.threshold,
            self.config_fingerprint,
            self.seed
        )
    }
}
