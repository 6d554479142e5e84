//! Multi-scale multiple-instance contrastive losses and mask cross entropy.
//!
//! For every stage `s` the similarity matrix `S^s[i, m] = sim(a_i, v_m^s)` holds
//! the max-pooled cosine similarity between audio `i` and visual bag `m`.
//! `L_a2v` normalizes each row over visual samples, `L_v2a` each column over
//! audio samples; both sum over stages and average over the batch.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, SoftMask};
use crate::tensor::Tensor;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Batch of audio vectors `[B, D]` and per-stage visual maps `[B, D, H^s, W^s]`.
#[derive(Clone, Debug)]
pub struct BatchEmbeddings {
    pub audio: Tensor,
    pub visual: Vec<Tensor>,
    pub temperature: f64,
}

impl BatchEmbeddings {
    pub fn batch_size(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio.ndim() != 2 {
            return Err(Error::shape("batch audio", "[B, D]", self.audio.shape()));
        }
        let (b, d) = (self.audio.shape()[0], self.audio.shape()[1]);
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.visual.is_empty() {
            return Err(Error::Config("batch has no visual stages".into()));
        }
        for v in &self.visual {
            if v.ndim() != 4 || v.shape()[0] != b || v.shape()[1] != d {
                return Err(Error::shape("batch visual stage", format!("[{b}, {d}, h, w]"), v.shape()));
            }
        }
        Ok(())
    }

    /// Per-stage similarity matrices `[B, B]`.
    pub fn similarities(&self) -> Result<Vec<Tensor>> {
        self.validate()?;
        let mut g = Graph::new();
        let a = g.constant(self.audio.clone());
        Ok(self
            .visual
            .iter()
            .map(|v| {
                let vv = g.constant(v.clone());
                let s = g.max_cos_sim(a, vv);
                g.value(s).clone()
            })
            .collect())
    }
}

/// Which softmax family the InfoNCE term normalizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Fixed audio, contrast visual bags (rows).
    AudioToVisual,
    /// Fixed visual bag, contrast audio (columns).
    VisualToAudio,
}

/// Graph form: sum over stages of the InfoNCE term for one direction.
pub fn contrastive_on_tape(
    g: &mut Graph,
    audio: Var,
    stages: &[Var],
    tau: f64,
    dir: Direction,
) -> Var {
    let mut total: Option<Var> = None;
    for &v in stages {
        let s = g.max_cos_sim(audio, v);
        let l = g.info_nce(s, tau, dir == Direction::VisualToAudio);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    total.expect("at least one stage")
}

/// The same objective evaluated directly from per-stage similarity matrices.
pub fn contrastive_from_similarities(sims: &[Tensor], tau: f64, dir: Direction) -> Result<f64> {
    let mut g = Graph::new();
    let mut total = 0.0;
    for s in sims {
        let b = s.shape()[0];
        if s.shape() != [b, b] {
            return Err(Error::shape("similarity matrix", "[B, B]", s.shape()));
        }
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let sv = g.constant(s.clone());
        let l = g.info_nce(sv, tau, dir == Direction::VisualToAudio);
        total += g.value(l).item();
    }
    Ok(total)
}

fn contrastive(b: &BatchEmbeddings, dir: Direction) -> Result<f64> {
    b.validate()?;
    let mut g = Graph::new();
    let a = g.constant(b.audio.clone());
    let stages: Vec<Var> = b.visual.iter().map(|v| g.constant(v.clone())).collect();
    let l = contrastive_on_tape(&mut g, a, &stages, b.temperature, dir);
    Ok(g.value(l).item())
}

pub fn loss_a2v(b: &BatchEmbeddings) -> Result<f64> {
    contrastive(b, Direction::AudioToVisual)
}

pub fn loss_v2a(b: &BatchEmbeddings) -> Result<f64> {
    contrastive(b, Direction::VisualToAudio)
}

pub fn loss_avf(b: &BatchEmbeddings) -> Result<f64> {
    Ok(loss_a2v(b)? + loss_v2a(b)?)
}

/// Mean pixel BCE with the prediction clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss_mask_bce(m: &SoftMask, target: &BinaryMask) -> Result<f64> {
    if (m.height, m.width) != (target.height, target.width) {
        return Err(Error::shape(
            "loss_mask_bce",
            (target.height, target.width),
            (m.height, m.width),
        ));
    }
    let mut g = Graph::new();
    let mv = g.constant(Tensor::new(vec![m.height, m.width], m.values.clone()));
    let l = g.bce(mv, &target.to_tensor());
    Ok(g.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub avf: f64,
    pub pmr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { avf: 1.0, pmr: 1.0 }
    }
}

/// Per-step loss record, one JSON object per line in training logs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_a2v: f64,
    pub l_v2a: f64,
    pub l_avf: f64,
    pub l_pmr: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_a2v: f64, l_v2a: f64, l_pmr: f64, w: LossWeights) -> Self {
        let l_avf = l_a2v + l_v2a;
        Self {
            l_a2v,
            l_v2a,
            l_avf,
            l_pmr,
            total: w.avf * l_avf + w.pmr * l_pmr,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_a2v, self.l_v2a, self.l_avf, self.l_pmr, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L = L_avf + L_pmr` for a batch, with `masks[i]` the prediction for sample `i`
/// and `pseudo[i]` its binary target; `L_pmr` averages over the batch.
pub fn loss_total(b: &BatchEmbeddings, masks: &[SoftMask], pseudo: &[BinaryMask]) -> Result<LossReport> {
    loss_total_weighted(b, masks, pseudo, LossWeights::default())
}

pub fn loss_total_weighted(
    b: &BatchEmbeddings,
    masks: &[SoftMask],
    pseudo: &[BinaryMask],
    w: LossWeights,
) -> Result<LossReport> {
    if masks.len() != pseudo.len() || masks.is_empty() {
        return Err(Error::shape("loss_total masks", pseudo.len(), masks.len()));
    }
    let mut l_pmr = 0.0;
    for (m, y) in masks.iter().zip(pseudo) {
        l_pmr += loss_mask_bce(m, y)?;
    }
    l_pmr /= masks.len() as f64;
    Ok(LossReport::new(loss_a2v(b)?, loss_v2a(b)?, l_pmr, w))
}
