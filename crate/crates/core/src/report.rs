//! Evaluation reports: per-sample scores and decisions plus aggregate
//! metrics, serialized as JSON for the significance test.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMetadata {
    pub mode: String,
    /// Sampling passes; absent in plain mode.
    pub t: Option<usize>,
    /// Dropout rate; absent in plain mode.
    pub p_drop: Option<f64>,
    pub alpha: f64,
    pub rho: f64,
    pub seed: u64,
    /// `1/tau` variance offset in precision mode, 0 in empirical mode.
    pub tau_inverse_offset: f64,
    /// Final activation: "softmax" (classification) or "sigmoid" (multilabel).
    pub head: String,
    /// Fingerprint of the label matrix; two reports are comparable only when
    /// their fingerprints agree.
    pub label_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregates {
    /// Top-k error per k (classification heads only).
    pub top_k_errors: BTreeMap<usize, f64>,
    /// Per-class average precision; `null` entries mark classes without
    /// positives (multilabel heads only).
    pub per_class_ap: Option<Vec<Option<f64>>>,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub per_sample_scores: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    /// 1 = correct top-1 decision, 0 = wrong; classification heads only.
    pub per_sample_correct: Option<Vec<u8>>,
    pub aggregates: Aggregates,
}

/// Stable fingerprint of a label matrix (counter-RNG mixing over the exact
/// f64 bit patterns, plus the dimensions).
pub fn label_fingerprint(labels: &[Vec<f64>]) -> String {
    let mut h = rng::hash(labels.len() as u64, &[]);
    for row in labels {
        h = rng::hash(h, &[row.len() as u64]);
        for &v in row {
            h = rng::hash(h, &[v.to_bits()]);
        }
    }
    format!("{h:016x}")
}

impl EvalReport {
    /// Recomputes every aggregate from the per-sample fields and checks the
    /// stored values match (1e-12), along with structural invariants.
    pub fn verify(&self) -> Result<()> {
        let n = self.per_sample_scores.len();
        if n == 0 || self.labels.len() != n {
            return Err(Error::Correctness(format!(
                "report has {n} score rows and {} label rows",
                self.labels.len()
            )));
        }
        if self.metadata.label_hash != label_fingerprint(&self.labels) {
            return Err(Error::Correctness(
                "stored label hash does not match the label matrix".into(),
            ));
        }
        if let Some(correct) = &self.per_sample_correct {
            if correct.len() != n {
                return Err(Error::Correctness(format!(
                    "{} correctness entries for {n} samples",
                    correct.len()
                )));
            }
            let recomputed = per_sample_correct(&self.per_sample_scores, &self.labels)?;
            if &recomputed != correct {
                return Err(Error::Correctness(
                    "stored per-sample decisions disagree with the score matrix".into(),
                ));
            }
        }
        for (&k, &stored) in &self.aggregates.top_k_errors {
            let fresh = metrics::top_k_error(&self.per_sample_scores, &self.labels, k)?;
            if (fresh - stored).abs() > 1e-12 {
                return Err(Error::Correctness(format!(
                    "stored top-{k} error {stored} vs recomputed {fresh}"
                )));
            }
        }
        if let Some(stored_map) = self.aggregates.map {
            let fresh = metrics::mean_average_precision(&self.per_sample_scores, &self.labels)?;
            if (fresh.mean - stored_map).abs() > 1e-12 {
                return Err(Error::Correctness(format!(
                    "stored mAP {stored_map} vs recomputed {}",
                    fresh.mean
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Loads and verifies a report.
    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(display.clone(), e))?;
        let report: EvalReport =
            serde_json::from_str(&text).map_err(|e| Error::format(&display, e.to_string()))?;
        report.verify()?;
        Ok(report)
    }
}

/// Top-1 decisions: argmax of the score row (lowest index on ties) compared
/// against the argmax of the one-hot label row.
pub fn per_sample_correct(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<Vec<u8>> {
    scores
        .iter()
        .zip(labels)
        .map(|(row, label)| {
            let truth = label
                .iter()
                .position(|&v| v == 1.0)
                .ok_or_else(|| Error::Argument("label row is not one-hot".into()))?;
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            Ok(u8::from(best == truth))
        })
        .collect()
}
