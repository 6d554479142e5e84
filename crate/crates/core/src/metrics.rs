//! Region IoU and F-score over binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Default `β²` for the F-score.
pub const DEFAULT_BETA_SQ: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "metrics",
            (gt.height, gt.width),
            (pred.height, pred.width),
        ));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `|pred ∧ gt| / |pred ∨ gt|`; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let union = c.tp + c.fp + c.fn_;
    Ok(if union == 0 {
        1.0
    } else {
        c.tp as f64 / union as f64
    })
}

pub fn miou(pairs: &[(BinaryMask, BinaryMask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::NoEvaluationPairs);
    }
    let mut s = 0.0;
    for (p, g) in pairs {
        s += iou(p, g)?;
    }
    Ok(s / pairs.len() as f64)
}

/// `(1 + β²) P R / (β² P + R)`. With no true positives the score is 1 when both
/// masks are empty and 0 otherwise.
pub fn f_score(pred: &BinaryMask, gt: &BinaryMask, beta_sq: f64) -> Result<f64> {
    if !(beta_sq > 0.0) {
        return Err(Error::Config(format!("beta_sq must be > 0, got {beta_sq}")));
    }
    let c = confusion(pred, gt)?;
    if c.tp == 0 {
        return Ok(if c.fp == 0 && c.fn_ == 0 { 1.0 } else { 0.0 });
    }
    let precision = c.tp as f64 / (c.tp + c.fp) as f64;
    let recall = c.tp as f64 / (c.tp + c.fn_) as f64;
    Ok((1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub iou: f64,
    pub fscore: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub fscore: f64,
    pub beta_sq: f64,
    pub threshold: f64,
    pub n_pairs: usize,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    /// Aggregates `(id, pred, gt)` triples. Frames are averaged individually.
    pub fn from_pairs(
        items: &[(String, BinaryMask, BinaryMask)],
        beta_sq: f64,
        threshold: f64,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::NoEvaluationPairs);
        }
        let per_sample = items
            .iter()
            .map(|(id, p, g)| {
                Ok(SampleMetrics {
                    id: id.clone(),
                    iou: iou(p, g)?,
                    fscore: f_score(p, g, beta_sq)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_sample.len() as f64;
        Ok(Self {
            miou: per_sample.iter().map(|s| s.iou).sum::<f64>() / n,
            fscore: per_sample.iter().map(|s| s.fscore).sum::<f64>() / n,
            beta_sq,
            threshold,
            n_pairs: per_sample.len(),
            per_sample,
        })
    }
}
