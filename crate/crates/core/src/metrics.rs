//! Calibration and accuracy metrics.
//!
//! Confidence is the largest predicted probability and the prediction is its
//! class (ties to the lowest index). Sample `i` falls in bin `m` when its
//! confidence lies in `((m − 1)/M, m/M]`; confidence exactly 0 goes to bin 1.

use std::fmt;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::RatioDiagnostics;
use crate::learner::{self, argmax, PROB_FLOOR};

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub count: usize,
    /// Fraction of correct predictions; 0 for an empty bin.
    pub accuracy: f64,
    /// Mean confidence; 0 for an empty bin.
    pub mean_confidence: f64,
}

impl Bin {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub m_bins: usize,
    pub bins: Vec<Bin>,
}

/// 1-based bin of a confidence value.
pub fn bin_index(confidence: f64, m_bins: usize) -> usize {
    let m = m_bins as f64;
    let mut idx = ((confidence * m).ceil() as usize).clamp(1, m_bins);
    // guard against rounding in `confidence * m`
    if idx > 1 && confidence <= (idx - 1) as f64 / m {
        idx -= 1;
    } else if idx < m_bins && confidence > idx as f64 / m {
        idx += 1;
    }
    idx
}

impl ReliabilityBins {
    /// Bins from raw (confidence, correct) pairs.
    pub fn from_confidences(confidences: &[f64], correct: &[bool], m_bins: usize) -> Result<Self> {
        if m_bins == 0 {
            return Err(Error::config("m_bins", "must be >= 1"));
        }
        if confidences.len() != correct.len() {
            return Err(Error::Shape(
                "confidences and correctness differ in length".into(),
            ));
        }
        let mut counts = vec![0usize; m_bins];
        let mut hits = vec![0usize; m_bins];
        let mut conf_sum = vec![0.0; m_bins];
        for (&c, &ok) in confidences.iter().zip(correct) {
            let b = bin_index(c, m_bins) - 1;
            counts[b] += 1;
            hits[b] += usize::from(ok);
            conf_sum[b] += c;
        }
        let bins = (0..m_bins)
            .map(|b| {
                if counts[b] == 0 {
                    Bin {
                        count: 0,
                        accuracy: 0.0,
                        mean_confidence: 0.0,
                    }
                } else {
                    Bin {
                        count: counts[b],
                        accuracy: hits[b] as f64 / counts[b] as f64,
                        mean_confidence: conf_sum[b] / counts[b] as f64,
                    }
                }
            })
            .collect();
        Ok(ReliabilityBins { m_bins, bins })
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// `(low, high]` edges of 1-based bin `m`.
    pub fn edges(&self, m: usize) -> (f64, f64) {
        let total = self.m_bins as f64;
        ((m - 1) as f64 / total, m as f64 / total)
    }

    /// `Σ_m (|B_m| / n) · |acc(B_m) − conf(B_m)|`, 0 when there are no samples.
    pub fn ece(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .filter(|b| !b.is_empty())
            .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }

    /// Rows `bin_low,bin_high,count,accuracy,confidence,gap`; empty bins leave
    /// the last three fields blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count,accuracy,confidence,gap\n");
        for (i, b) in self.bins.iter().enumerate() {
            let (lo, hi) = self.edges(i + 1);
            if b.is_empty() {
                out.push_str(&format!("{lo},{hi},0,,,\n"));
            } else {
                out.push_str(&format!(
                    "{lo},{hi},{},{},{},{}\n",
                    b.count,
                    b.accuracy,
                    b.mean_confidence,
                    b.accuracy - b.mean_confidence
                ));
            }
        }
        out
    }
}

fn check(probs: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= probs.ncols()) {
        return Err(Error::Shape(format!(
            "label {bad} outside [0, {})",
            probs.ncols()
        )));
    }
    Ok(())
}

fn confidences_and_correct(probs: ArrayView2<f64>, labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    probs
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let pred = argmax(row);
            (row[pred], pred == y)
        })
        .unzip()
}

pub fn reliability_bins(
    probs: ArrayView2<f64>,
    labels: &[usize],
    m_bins: usize,
) -> Result<ReliabilityBins> {
    check(probs, labels)?;
    let (conf, correct) = confidences_and_correct(probs, labels);
    ReliabilityBins::from_confidences(&conf, &correct, m_bins)
}

pub fn ece(probs: ArrayView2<f64>, labels: &[usize], m_bins: usize) -> Result<f64> {
    Ok(reliability_bins(probs, labels, m_bins)?.ece())
}

pub fn accuracy(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check(probs, labels)?;
    if labels.is_empty() {
        return Err(Error::Empty("accuracy of zero samples".into()));
    }
    let hits = probs
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean `−log max(p[y], 1e-12)`.
pub fn nll(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check(probs, labels)?;
    if labels.is_empty() {
        return Err(Error::Empty("nll of zero samples".into()));
    }
    let per_sample = learner::per_sample_nll(probs, labels)?;
    debug_assert!(per_sample.iter().all(|v| *v <= -PROB_FLOOR.ln()));
    Ok(per_sample.iter().sum::<f64>() / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Uncalibrated,
    Unweighted,
    Weighted,
    UsingTarget,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Uncalibrated,
        Method::Unweighted,
        Method::Weighted,
        Method::UsingTarget,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Uncalibrated => "uncalibrated",
            Method::Unweighted => "unweighted",
            Method::Weighted => "weighted",
            Method::UsingTarget => "using_target",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub ece: f64,
    pub accuracy: f64,
    pub nll: f64,
    pub bins: ReliabilityBins,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<RatioDiagnostics>,
}

impl EvaluationReport {
    pub fn evaluate(
        probs: ArrayView2<f64>,
        labels: &[usize],
        m_bins: usize,
        method: Method,
    ) -> Result<Self> {
        let bins = reliability_bins(probs, labels, m_bins)?;
        Ok(EvaluationReport {
            ece: bins.ece(),
            accuracy: accuracy(probs, labels)?,
            nll: nll(probs, labels)?,
            bins,
            method,
            diagnostics: None,
        })
    }
}
