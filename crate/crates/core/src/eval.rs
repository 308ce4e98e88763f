//! Patient-level metrics: AUROC and thresholded confusion-matrix rates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::score::PatientRecord;

fn split_records<T: Scalar>(records: &[PatientRecord<T>]) -> Result<(Vec<T>, Vec<u8>)> {
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        scores.push(r.aggregate_value()?);
        labels.push(r.label);
    }
    Ok((scores, labels))
}

fn check_labels<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("aggregate scores".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("labels must be 0 or 1, found {l}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    match (pos, neg) {
        (0, _) => Err(Error::SingleClass(0)),
        (_, 0) => Err(Error::SingleClass(1)),
        _ => Ok((pos, neg)),
    }
}

/// Rank-based AUROC with midranks for ties: the probability that a random
/// diseased score exceeds a random healthy one, ties counting one half.
///
/// Ranks are accumulated as doubled integers, so the result is the exact
/// ratio `(2·wins + ties) / (2·n_pos·n_neg)` rounded once.
pub fn auroc_scores<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share the midrank (i+1+j)/2
        let doubled_midrank = (i + 1 + j) as u128;
        let positives = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        doubled_rank_sum += doubled_midrank * positives;
        i = j;
    }
    let (pos, neg) = (pos as u128, neg as u128);
    let numerator = doubled_rank_sum - pos * (pos + 1);
    Ok(numerator as f64 / (2 * pos * neg) as f64)
}

pub fn auroc<T: Scalar>(records: &[PatientRecord<T>]) -> Result<f64> {
    let (scores, labels) = split_records(records)?;
    auroc_scores(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.fp + self.tn + self.fn_) as f64
    }

    pub fn recall(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn precision(&self) -> Result<f64> {
        if self.tp + self.fp == 0 {
            return Err(Error::NoPositivePredictions);
        }
        Ok(self.tp as f64 / (self.tp + self.fp) as f64)
    }

    pub fn specificity(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }
}

fn confusion<T: Scalar>(scores: &[T], labels: &[u8], threshold: T) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    cm
}

/// Predicts diseased iff the aggregate is `>= threshold`.
pub fn threshold_metrics<T: Scalar>(records: &[PatientRecord<T>], threshold: T) -> Result<ConfusionMatrix> {
    let (scores, labels) = split_records(records)?;
    check_labels(&scores, &labels)?;
    Ok(confusion(&scores, &labels, threshold))
}

/// Threshold maximizing Youden's J over the observed aggregates; ties go to
/// the lower threshold.
pub fn choose_threshold<T: Scalar>(records: &[PatientRecord<T>]) -> Result<T> {
    let (scores, labels) = split_records(records)?;
    check_labels(&scores, &labels)?;
    let mut candidates = scores.clone();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    candidates.dedup();
    let mut best = (candidates[0], f64::NEG_INFINITY);
    for &c in &candidates {
        let cm = confusion(&scores, &labels, c);
        let j = cm.recall() + cm.specificity() - 1.0;
        if j > best.1 {
            best = (c, j);
        }
    }
    Ok(best.0)
}

/// Evaluation summary written by the `evaluate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub strategy: String,
    pub auroc: f64,
    pub acc: f64,
    /// `None` when no patient was predicted diseased.
    pub precision: Option<f64>,
    pub recall: f64,
    pub threshold: f64,
    pub n: usize,
    /// Parameter count of the scored model, used to break selection ties.
    #[serde(default)]
    pub n_params: Option<usize>,
    /// Resolved settings that produced the report.
    #[serde(default)]
    pub config: serde_json::Value,
}
