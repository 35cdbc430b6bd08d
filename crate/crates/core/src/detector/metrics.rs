//! Accuracy and average precision for binary scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranking order used by every metric here: descending score, ties kept in
/// input order.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Non-interpolated average precision: `sum_k (R_k - R_{k-1}) P_k` over the
/// ranking, where `P_k` and `R_k` are precision and recall of the top `k`.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Metric(
            "average precision needs both positive and negative labels".into(),
        ));
    }
    let p = positives as f64;
    let mut tp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (rank, &i) in descending_order(scores).iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            let recall = tp as f64 / p;
            let precision = tp as f64 / (rank + 1) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Fraction of items whose thresholded score (`score >= threshold` means
/// label 1) matches the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| u8::from(s >= threshold) == l)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {l} is not 0 or 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub average_precision: f64,
    pub threshold: f64,
    pub n_real: usize,
    pub n_generated: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl EvalReport {
    pub fn from_scores(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> Result<Self> {
        let accuracy = accuracy(&scores, &labels, threshold)?;
        let average_precision = average_precision(&scores, &labels)?;
        let n_generated = labels.iter().filter(|&&l| l == 1).count();
        Ok(Self {
            accuracy,
            average_precision,
            threshold,
            n_real: labels.len() - n_generated,
            n_generated,
            scores,
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }
}
