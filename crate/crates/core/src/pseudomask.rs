//! Pseudo masks from contrastive class-agnostic activation maps.
//!
//! A visual encoder with a 1x1 activation head is trained with a
//! foreground/background contrast: activation-weighted pooled features of
//! different images attract (fg-fg, bg-bg) and fg-bg pairs repel. The map `A`,
//! a saliency map `S` and the label lookup `L = [0; 1, .., 1]` then give
//! `Ŷ(p) = L[argmax_c [S; A](c, p)]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Padding, Var};
use crate::encoders::{component_rng, pretrain_classifier, EncoderConfig, PretrainConfig, VisualEncoder};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{Adam, AdamConfig, Bound, Conv2d, ParamStore};
use crate::tensor::{resize_bilinear, Tensor};

/// How to decide which side of the learned contrast is the foreground.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityRule {
    /// Keep the map as learned.
    AsLearned,
    /// Flip a map whose border is more activated than the map on average.
    BorderIsBackground,
}

/// How contrast batches are drawn from the training images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcamBatching {
    /// Every batch holds images of one instance label, so foreground pairs
    /// share a category.
    ByLabel,
    /// Plain shuffled batches; labels are not needed.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoMaskConfig {
    /// Backbone of the activation model.
    pub encoder: EncoderConfig,
    /// Epochs of instance-label classification that initialize the backbone;
    /// 0 starts the contrast from random weights.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Encoder stage whose features feed the activation head and the contrast.
    pub feature_stage: usize,
    /// Number of activation channels `D_A`.
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub batching: CcamBatching,
    /// Label the saliency channel 1 and the activation channels 0.
    pub invert_saliency_label: bool,
    pub polarity: PolarityRule,
    /// Saliency detector trained on the background activation maps; `None`
    /// uses the background activation itself.
    pub detector: Option<DetectorConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Channels of the hidden convolutions.
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl DetectorConfig {
    pub fn toy() -> Self {
        Self {
            width: 16,
            epochs: 10,
            batch_size: 16,
            lr: 3e-3,
        }
    }
}

impl PseudoMaskConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                padding: Padding::Replicate,
                ..EncoderConfig::toy()
            },
            pretrain_epochs: 20,
            pretrain_lr: 5e-3,
            feature_stage: 0,
            channels: 1,
            epochs: 8,
            batch_size: 16,
            lr: 1e-3,
            batching: CcamBatching::ByLabel,
            invert_saliency_label: false,
            polarity: PolarityRule::BorderIsBackground,
            detector: Some(DetectorConfig::toy()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.feature_stage >= self.encoder.stages {
            return Err(Error::Config(format!(
                "pseudomask.feature_stage {} is out of range for {} stages",
                self.feature_stage, self.encoder.stages
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("pseudomask.channels must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("pseudomask.batch_size must be >= 2".into()));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return Err(Error::Config("pseudomask learning rates must be > 0".into()));
        }
        if let Some(d) = &self.detector {
            if d.width == 0 || d.batch_size == 0 || !(d.lr > 0.0) {
                return Err(Error::Config(
                    "pseudomask.detector needs width >= 1, batch_size >= 1 and lr > 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Whether training needs an instance label for every image.
    pub fn needs_labels(&self) -> bool {
        self.pretrain_epochs > 0 || self.batching == CcamBatching::ByLabel
    }
}

/// `[D_A, H, W]` activations in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAgnosticMap {
    pub values: Tensor,
}

impl ClassAgnosticMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::shape("class-agnostic map", "[D_A, H, W]", values.shape()));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("class-agnostic map values must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }
}

/// `[1, H, W]` saliency in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor,
}

impl SaliencyMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 3 || values.shape()[0] != 1 {
            return Err(Error::shape("saliency map", "[1, H, W]", values.shape()));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("saliency values must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }
}

/// Per-channel labels of the stacked `[S; A]` tensor: zeros for the saliency
/// channel, ones for the activation channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTensor {
    pub saliency: Tensor,
    pub activation: Tensor,
}

impl LabelTensor {
    pub fn new(channels: usize, h: usize, w: usize, invert: bool) -> Self {
        let (ls, la) = if invert { (1.0, 0.0) } else { (0.0, 1.0) };
        Self {
            saliency: Tensor::full(&[1, h, w], ls),
            activation: Tensor::full(&[channels, h, w], la),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.activation.shape();
        [1 + s[0], s[1], s[2]]
    }

    fn at(&self, channel: usize, pixel: usize) -> u8 {
        let plane = self.saliency.len();
        let v = if channel == 0 {
            self.saliency.data()[pixel]
        } else {
            self.activation.data()[(channel - 1) * plane + pixel]
        };
        v as u8
    }
}

/// `Ŷ(p) = L[argmax_c [S; A](c, p)](p)`, ties resolved toward the lowest channel.
pub fn refine_pseudo_mask(
    s: &SaliencyMap,
    a: &ClassAgnosticMap,
    invert_saliency_label: bool,
) -> Result<BinaryMask> {
    if s.size() != a.size() {
        return Err(Error::shape("refine_pseudo_mask", s.size(), a.size()));
    }
    let (h, w) = a.size();
    let plane = h * w;
    let labels = LabelTensor::new(a.channels(), h, w, invert_saliency_label);
    let values = (0..plane)
        .map(|p| {
            let mut best = s.values.data()[p];
            let mut arg = 0;
            for c in 0..a.channels() {
                let v = a.values.data()[c * plane + p];
                if v > best {
                    best = v;
                    arg = c + 1;
                }
            }
            labels.at(arg, p)
        })
        .collect();
    BinaryMask::new(h, w, values)
}

/// Source of saliency maps for the refinement step.
pub trait SaliencyProvider {
    /// `image` is `[3, H, W]`, `a` the activation map of that image.
    fn saliency(&self, id: &str, image: &Tensor, a: &ClassAgnosticMap) -> Result<SaliencyMap>;
}

/// Background activation `1 - max_c A`, min-max rescaled per image. A constant
/// map yields uniform 0.5.
#[derive(Clone, Copy, Debug, Default)]
pub struct BackgroundActivation;

impl SaliencyProvider for BackgroundActivation {
    fn saliency(&self, _id: &str, _image: &Tensor, a: &ClassAgnosticMap) -> Result<SaliencyMap> {
        Ok(derive_saliency(a))
    }
}

pub fn derive_saliency(a: &ClassAgnosticMap) -> SaliencyMap {
    let (h, w) = a.size();
    let plane = h * w;
    let bg: Vec<f64> = (0..plane)
        .map(|p| {
            let m = (0..a.channels())
                .map(|c| a.values.data()[c * plane + p])
                .fold(f64::NEG_INFINITY, f64::max);
            1.0 - m
        })
        .collect();
    let lo = bg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = bg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let values = if range < 1e-12 {
        vec![0.5; plane]
    } else {
        bg.iter().map(|v| (v - lo) / range).collect()
    };
    SaliencyMap {
        values: Tensor::new(vec![1, h, w], values),
    }
}

/// Externally computed saliency maps, read from `<dir>/<id>.png` (ids with `/`
/// are flattened to `__`), resized to the activation map when needed.
#[derive(Clone, Debug)]
pub struct FileSaliency {
    pub dir: PathBuf,
}

impl SaliencyProvider for FileSaliency {
    fn saliency(&self, id: &str, _image: &Tensor, a: &ClassAgnosticMap) -> Result<SaliencyMap> {
        let path = self.dir.join(format!("{}.png", file_stem_for(id)));
        let img = crate::mask::read_png(&path)?;
        let gray: Vec<f64> = img
            .pixels
            .chunks(img.channels)
            .map(|px| f64::from(px[0]) / 255.0)
            .collect();
        let t = Tensor::new(vec![1, img.height, img.width], gray);
        let (h, w) = a.size();
        let t = if (img.height, img.width) == (h, w) {
            t
        } else {
            resize_bilinear(&t, h, w)
        };
        SaliencyMap::new(t)
    }
}

/// Small fully convolutional saliency network: two stride-2 3x3 blocks, one
/// 3x3 block, a 1x1 sigmoid head. The output sits at a quarter of the image
/// resolution and is upsampled bilinearly.
pub struct SaliencyDetector {
    image_size: (usize, usize),
    convs: Vec<Conv2d>,
    head: Conv2d,
    store: ParamStore,
}

impl SaliencyDetector {
    fn new(cfg: &DetectorConfig, image_size: (usize, usize), seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = component_rng(seed, "saliency");
        let w = cfg.width;
        let convs = [(3, 2), (w, 2), (w, 1)]
            .iter()
            .enumerate()
            .map(|(i, &(cin, stride))| {
                Conv2d::new(&mut store, &mut rng, &format!("saliency.conv{i}"), cin, w, 3, stride, true)
                    .with_padding(Padding::Replicate)
            })
            .collect();
        let head = Conv2d::new(&mut store, &mut rng, "saliency.head", w, 1, 1, 1, true);
        Self {
            image_size,
            convs,
            head,
            store,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, images: Var) -> Var {
        let mut x = images;
        for c in &self.convs {
            let y = c.forward(g, p, x);
            x = g.relu(y);
        }
        let logits = self.head.forward(g, p, x);
        g.sigmoid(logits)
    }

    fn output_size(&self) -> (usize, usize) {
        (self.image_size.0.div_ceil(4), self.image_size.1.div_ceil(4))
    }

    /// Fits the detector to `targets` (`[1, H, W]` each, in `[0, 1]`) with
    /// per-pixel BCE. Returns the mean loss per epoch.
    pub fn train(
        cfg: &DetectorConfig,
        images: &[Tensor],
        targets: &[Tensor],
        seed: u64,
    ) -> Result<(Self, Vec<f64>)> {
        if images.is_empty() || images.len() != targets.len() {
            return Err(Error::shape("saliency targets", images.len(), targets.len()));
        }
        let size = (images[0].shape()[1], images[0].shape()[2]);
        let mut det = Self::new(cfg, size, seed);
        let (oh, ow) = det.output_size();
        let small: Vec<Tensor> = targets.iter().map(|t| resize_bilinear(t, oh, ow)).collect();
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &det.store,
        );
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut component_rng(seed, &format!("saliency-epoch{epoch}")));
            let (mut total, mut steps) = (0.0, 0);
            for chunk in order.chunks(cfg.batch_size) {
                let x = Tensor::stack(&chunk.iter().map(|&i| images[i].clone()).collect::<Vec<_>>());
                let y = Tensor::stack(&chunk.iter().map(|&i| small[i].clone()).collect::<Vec<_>>());
                let mut g = Graph::new();
                let p = det.store.bind(&mut g);
                let xv = g.constant(x);
                let pred = det.forward(&mut g, &p, xv);
                let loss = g.bce(pred, &y);
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: steps,
                        sample_ids: Vec::new(),
                    });
                }
                total += value;
                steps += 1;
                let mut grads = g.backward(loss);
                let grads = p.gradients(&mut grads);
                opt.step(&mut det.store, &grads);
            }
            losses.push(total / steps.max(1) as f64);
        }
        Ok((det, losses))
    }

    /// Saliency of one `[3, H, W]` image at image resolution.
    pub fn predict(&self, image: &Tensor) -> Result<SaliencyMap> {
        let (h, w) = self.image_size;
        if image.shape() != [3, h, w] {
            return Err(Error::shape("saliency detector input", [3, h, w], image.shape()));
        }
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(image.clone().reshape(&[1, 3, h, w]));
        let s = self.forward(&mut g, &p, x);
        let plane = g.value(s).index_axis0(0);
        SaliencyMap::new(resize_bilinear(&plane, h, w).map(|v| v.clamp(0.0, 1.0)))
    }
}

impl SaliencyProvider for SaliencyDetector {
    fn saliency(&self, _id: &str, image: &Tensor, a: &ClassAgnosticMap) -> Result<SaliencyMap> {
        let s = self.predict(image)?;
        if s.size() != a.size() {
            return Err(Error::shape("saliency map", a.size(), s.size()));
        }
        Ok(s)
    }
}

/// File-system safe name for a sample id.
pub fn file_stem_for(id: &str) -> String {
    id.replace(['/', '\\'], "__")
}

/// Visual encoder plus a 1x1 activation head on one of its stages.
pub struct CcamModel {
    cfg: PseudoMaskConfig,
    encoder: VisualEncoder,
    head: Conv2d,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CcamStepReport {
    pub loss: f64,
    /// Samples whose foreground or background weights vanished, falling back to
    /// unweighted pooling.
    pub fallbacks: usize,
}

impl CcamModel {
    pub fn new(cfg: &PseudoMaskConfig, seed: u64, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = component_rng(seed, "ccam");
        let encoder = VisualEncoder::new(&cfg.encoder, "ccam", store, &mut rng);
        let head = Conv2d::new(store, &mut rng, "ccam.act", cfg.encoder.dim, cfg.channels, 1, 1, true);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &PseudoMaskConfig {
        &self.cfg
    }

    /// `(all stage outputs, rectified features of the chosen stage [B, D, h, w],
    /// activations [B, D_A, h, w])`.
    fn forward_all(&self, g: &mut Graph, p: &Bound, images: Var) -> (Vec<Var>, Var, Var) {
        let stages = self.encoder.forward(g, p, images);
        let feats = g.relu(stages[self.cfg.feature_stage]);
        let logits = self.head.forward(g, p, feats);
        let act = g.sigmoid(logits);
        (stages, feats, act)
    }

    /// Returns `(features [B, D, h, w], activations [B, D_A, h, w])`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var) -> (Var, Var) {
        let (_, feats, act) = self.forward_all(g, p, images);
        (feats, act)
    }

    fn upsample(&self, act: &Tensor) -> Vec<ClassAgnosticMap> {
        let (h, w) = self.cfg.encoder.image_size;
        let up = resize_bilinear(act, h, w);
        (0..up.shape()[0])
            .map(|i| ClassAgnosticMap {
                values: up.index_axis0(i).map(|v| v.clamp(0.0, 1.0)),
            })
            .collect()
    }

    /// Activation maps at image resolution, as learned.
    pub fn activation_maps(&self, store: &ParamStore, images: &Tensor) -> Vec<ClassAgnosticMap> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let (_, act) = self.forward(&mut g, &p, x);
        self.upsample(g.value(act))
    }
}

/// Single foreground weight map `[B, 1, h, w]` from `[B, D_A, h, w]` activations
/// (channel mean when `D_A > 1`).
fn foreground_weight(g: &mut Graph, act: Var) -> Var {
    let c = g.shape(act)[1];
    if c == 1 {
        return act;
    }
    let avg = g.constant(Tensor::full(&[1, c, 1, 1], 1.0 / c as f64));
    g.conv2d(act, avg, None, 1, 0)
}

/// Foreground/background contrast over ordered cross-batch pairs `i != j`:
/// mean of `(1 - cos(fg_i, fg_j)) + (1 - cos(bg_i, bg_j)) + max(0, cos(fg_i, bg_j))`.
pub fn ccam_loss_on_tape(g: &mut Graph, feats: Var, act: Var) -> Var {
    let weight = foreground_weight(g, act);
    let fg = g.weighted_pool(feats, weight, false);
    let bg = g.weighted_pool(feats, weight, true);
    let ff = g.cosine_matrix(fg, fg);
    let bb = g.cosine_matrix(bg, bg);
    let fb = g.cosine_matrix(fg, bg);
    let ff = g.off_diag_mean(ff);
    let bb = g.off_diag_mean(bb);
    let fb = g.relu(fb);
    let fb = g.off_diag_mean(fb);
    let pos = g.add(ff, bb);
    let pos = g.scale(pos, -1.0);
    let pos = g.add_scalar(pos, 2.0);
    g.add(pos, fb)
}

/// Evaluates the contrast for fixed features `[B, D, h, w]` and weights `[B, 1, h, w]`.
pub fn ccam_loss(feats: &Tensor, act: &Tensor) -> Result<f64> {
    let b = feats.shape()[0];
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let a = g.constant(act.clone());
    let l = ccam_loss_on_tape(&mut g, f, a);
    Ok(g.value(l).item())
}

fn count_fallbacks(weight: &Tensor) -> usize {
    let b = weight.shape()[0];
    let p = weight.len() / b;
    (0..b)
        .filter(|&i| {
            let w = &weight.data()[i * p..(i + 1) * p];
            let fg: f64 = w.iter().sum();
            let bg: f64 = w.iter().map(|x| 1.0 - x).sum();
            fg < crate::autograd::POOL_EPS || bg < crate::autograd::POOL_EPS
        })
        .count()
}

/// One optimizer step on a batch of images `[B, 3, H, W]`. Returns the
/// activation maps of the batch (before the update, as learned) and the step
/// report.
pub fn ccam_train_step(
    model: &CcamModel,
    store: &mut ParamStore,
    opt: &mut Adam,
    images: &Tensor,
) -> Result<(Vec<ClassAgnosticMap>, CcamStepReport)> {
    let b = images.shape()[0];
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(images.clone());
    let (feats, act) = model.forward(&mut g, &p, x);
    let loss = ccam_loss_on_tape(&mut g, feats, act);
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            sample_ids: Vec::new(),
        });
    }
    let maps = model.upsample(g.value(act));
    let fallbacks = count_fallbacks(g.value(act));
    let mut grads = g.backward(loss);
    let grads = p.gradients(&mut grads);
    opt.step(store, &grads);
    Ok((
        maps,
        CcamStepReport {
            loss: loss_value,
            fallbacks,
        },
    ))
}

/// Trained activation model.
pub struct TrainedCcam {
    pub model: CcamModel,
    pub store: ParamStore,
    /// Mean classification loss per backbone pretraining epoch.
    pub pretrain_losses: Vec<f64>,
    /// Mean contrast loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainedCcam {
    /// Activation maps with the polarity rule applied to each image.
    pub fn maps(&self, images: &Tensor) -> Vec<ClassAgnosticMap> {
        let mut maps = self.model.activation_maps(&self.store, images);
        if self.model.cfg.polarity == PolarityRule::BorderIsBackground {
            for m in &mut maps {
                if border_excess(m) > 0.0 {
                    m.values = m.values.map(|v| 1.0 - v);
                }
            }
        }
        maps
    }
}

/// Mean activation on the one-pixel border minus the mean over the whole map.
pub fn border_excess(m: &ClassAgnosticMap) -> f64 {
    let (c, h, w) = (m.channels(), m.size().0, m.size().1);
    let mut border = (0.0, 0usize);
    let mut all = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = m.values.data()[(ch * h + y) * w + x];
                all += v;
                if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                    border.0 += v;
                    border.1 += 1;
                }
            }
        }
    }
    border.0 / border.1.max(1) as f64 - all / m.values.len().max(1) as f64
}

fn labels_of(labels: Option<&[usize]>, n: usize) -> Result<&[usize]> {
    match labels {
        Some(l) if l.len() == n => Ok(l),
        Some(l) => Err(Error::shape("instance labels", n, l.len())),
        None => Err(Error::Config(
            "pseudo-mask training with label batching or pretraining needs an instance label per image".into(),
        )),
    }
}

/// Contrast batches for one epoch.
fn contrast_batches(cfg: &PseudoMaskConfig, labels: Option<&[usize]>, n: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = component_rng(seed, &format!("ccam-epoch{epoch}"));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    match (cfg.batching, labels) {
        (CcamBatching::ByLabel, Some(labels)) => {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &l) in labels.iter().enumerate() {
                groups.entry(l).or_default().push(i);
            }
            for idx in groups.values_mut() {
                idx.shuffle(&mut rng);
                batches.extend(idx.chunks(cfg.batch_size).map(<[usize]>::to_vec));
            }
            batches.shuffle(&mut rng);
        }
        _ => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            batches.extend(order.chunks(cfg.batch_size).map(<[usize]>::to_vec));
        }
    }
    batches.retain(|b| b.len() >= 2);
    batches
}

/// Trains the activation model on `images` (each `[3, H, W]`). `labels` holds
/// one instance label per image and is required when
/// [`PseudoMaskConfig::needs_labels`] holds.
pub fn train_ccam(
    cfg: &PseudoMaskConfig,
    images: &[Tensor],
    labels: Option<&[usize]>,
    seed: u64,
) -> Result<TrainedCcam> {
    if images.len() < 2 {
        return Err(Error::BatchTooSmall(images.len()));
    }
    let labels = if cfg.needs_labels() {
        Some(labels_of(labels, images.len())?)
    } else {
        None
    };
    let mut store = ParamStore::new();
    let model = CcamModel::new(cfg, seed, &mut store)?;
    let pretrain_losses = match labels {
        Some(l) if cfg.pretrain_epochs > 0 => {
            let pre = PretrainConfig {
                epochs: cfg.pretrain_epochs,
                lr: cfg.pretrain_lr,
                batch_size: cfg.batch_size,
            };
            pretrain_classifier(&model.encoder, &mut store, images, l, &pre, seed, "ccam")?
        }
        _ => Vec::new(),
    };
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &store,
    );
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut steps = 0;
        for batch in contrast_batches(cfg, labels, images.len(), seed, epoch) {
            let x = Tensor::stack(&batch.iter().map(|&i| images[i].clone()).collect::<Vec<_>>());
            let (_, report) = ccam_train_step(&model, &mut store, &mut opt, &x)?;
            total += report.loss;
            steps += 1;
        }
        let mean = total / steps.max(1) as f64;
        log::debug!("ccam epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(TrainedCcam {
        model,
        store,
        pretrain_losses,
        epoch_losses,
    })
}

/// Trains the configured saliency detector on the background activation maps
/// of `images`; `None` when no detector is configured.
pub fn train_saliency_detector(
    trained: &TrainedCcam,
    images: &[Tensor],
    seed: u64,
) -> Result<Option<(SaliencyDetector, Vec<f64>)>> {
    let Some(cfg) = &trained.model.config().detector else {
        return Ok(None);
    };
    let mut targets = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        for a in trained.maps(&Tensor::stack(chunk)) {
            targets.push(derive_saliency(&a).values);
        }
    }
    SaliencyDetector::train(cfg, images, &targets, seed).map(Some)
}

/// Pseudo masks keyed by sample id.
pub type PseudoMaskSet = BTreeMap<String, BinaryMask>;

/// Activation map -> saliency -> refinement for every `(id, image)`.
pub fn generate_pseudo_masks(
    trained: &TrainedCcam,
    provider: &dyn SaliencyProvider,
    samples: &[(String, Tensor)],
) -> Result<PseudoMaskSet> {
    let invert = trained.model.config().invert_saliency_label;
    let mut out = PseudoMaskSet::new();
    for chunk in samples.chunks(32) {
        let batch = Tensor::stack(&chunk.iter().map(|(_, im)| im.clone()).collect::<Vec<_>>());
        let maps = trained.maps(&batch);
        for ((id, image), a) in chunk.iter().zip(&maps) {
            let s = provider.saliency(id, image, a)?;
            out.insert(id.clone(), refine_pseudo_mask(&s, a, invert)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub fg_pixel_fraction: f64,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `<out_dir>/<id>.png` (1-bit) per mask and `manifest.jsonl`; existing
/// files are overwritten.
pub fn export_pseudo_masks(masks: &PseudoMaskSet, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(masks.len());
    for (id, m) in masks {
        let name = format!("{}.png", file_stem_for(id));
        m.write_png(&out_dir.join(&name))?;
        entries.push(ManifestEntry {
            id: id.clone(),
            path: name,
            fg_pixel_fraction: m.fg_fraction(),
        });
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for e in &entries {
        writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(&manifest, err))?;
    }
    Ok(entries)
}

/// Loads masks listed in `<dir>/manifest.jsonl`.
pub fn load_pseudo_masks(dir: &Path) -> Result<PseudoMaskSet> {
    let manifest = dir.join(MANIFEST_FILE);
    let f = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = PseudoMaskSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::CorruptLog {
            path: manifest.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.insert(entry.id, BinaryMask::read_png(&dir.join(&entry.path))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn amap(c: usize, h: usize, w: usize, f: impl FnMut(usize) -> f64) -> ClassAgnosticMap {
        ClassAgnosticMap::new(Tensor::from_fn(&[c, h, w], f)).unwrap()
    }

    fn smap(h: usize, w: usize, f: impl FnMut(usize) -> f64) -> SaliencyMap {
        SaliencyMap::new(Tensor::from_fn(&[1, h, w], f)).unwrap()
    }

    #[test]
    fn dominant_channels() {
        let s = smap(4, 4, |_| 0.9);
        let a = amap(1, 4, 4, |_| 0.1);
        assert_eq!(refine_pseudo_mask(&s, &a, false).unwrap().count_ones(), 0);
        let s = smap(4, 4, |_| 0.1);
        let a = amap(3, 4, 4, |i| if i >= 32 { 0.9 } else { 0.0 });
        assert_eq!(refine_pseudo_mask(&s, &a, false).unwrap().count_ones(), 16);
        // Inverted labels flip the outcome.
        assert_eq!(refine_pseudo_mask(&s, &a, true).unwrap().count_ones(), 0);
    }

    #[test]
    fn ties_go_to_the_saliency_channel() {
        let s = smap(2, 2, |_| 0.5);
        let a = amap(2, 2, 2, |_| 0.5);
        assert_eq!(refine_pseudo_mask(&s, &a, false).unwrap().count_ones(), 0);
    }

    #[test]
    fn refine_rejects_mismatched_sizes() {
        let s = smap(2, 3, |_| 0.5);
        let a = amap(1, 3, 2, |_| 0.5);
        assert!(matches!(refine_pseudo_mask(&s, &a, false), Err(Error::Shape { .. })));
    }

    #[test]
    fn label_tensor_layout() {
        let l = LabelTensor::new(3, 2, 5, false);
        assert_eq!(l.shape(), [4, 2, 5]);
        assert!(l.saliency.data().iter().all(|&v| v == 0.0));
        assert!(l.activation.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn saliency_examples() {
        let ones = amap(1, 3, 3, |_| 1.0);
        let s = derive_saliency(&ones);
        assert!(s.values.data().iter().all(|&v| v == 0.5));

        let blob = amap(1, 5, 5, |i| if i == 12 { 0.8 } else { 0.2 });
        let s = derive_saliency(&blob);
        assert_eq!(s.values.data()[12], 0.0);
        assert!(s.values.data().iter().enumerate().all(|(i, &v)| i == 12 || v == 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = amap(2, 4, 4, |_| rng.gen_range(0.0..1.0));
        let s = derive_saliency(&a);
        let bg: Vec<f64> = (0..16)
            .map(|p| 1.0 - a.values.data()[p].max(a.values.data()[16 + p]))
            .collect();
        let lo = bg.iter().cloned().fold(f64::MAX, f64::min);
        let hi = bg.iter().cloned().fold(f64::MIN, f64::max);
        for (p, &b) in bg.iter().enumerate() {
            assert!((s.values.data()[p] - (b - lo) / (hi - lo)).abs() < 1e-12);
        }
    }

    #[test]
    fn ccam_loss_identical_pair_has_zero_positive_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::from_fn(&[1, 4, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[1, 1, 3, 3], |_| rng.gen_range(0.0..1.0));
        let feats = Tensor::stack(&[f.index_axis0(0), f.index_axis0(0)]);
        let act = Tensor::stack(&[w.index_axis0(0), w.index_axis0(0)]);
        // Only the fg-bg repulsion remains.
        let mut g = Graph::new();
        let fv = g.constant(feats.clone());
        let av = g.constant(act.clone());
        let fg = g.weighted_pool(fv, av, false);
        let bg = g.weighted_pool(fv, av, true);
        let fb = g.cosine_matrix(fg, bg);
        let want = g.value(fb).data()[1].max(0.0);
        assert!((ccam_loss(&feats, &act).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn saturated_activation_falls_back_to_mean_for_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = Tensor::from_fn(&[2, 3, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let act = Tensor::full(&[2, 1, 2, 2], 1.0);
        assert_eq!(count_fallbacks(&act), 2);
        // fg and bg pools both equal the unweighted mean, so fg-fg and bg-bg agree.
        let mut g = Graph::new();
        let fv = g.constant(feats.clone());
        let av = g.constant(act.clone());
        let bg = g.weighted_pool(fv, av, true);
        let mean = g.global_avg_pool(fv);
        assert!(g.value(bg).max_abs_diff(g.value(mean)) < 1e-15);
        assert!(ccam_loss(&feats, &act).unwrap().is_finite());
    }

    #[test]
    fn ccam_loss_is_symmetric_in_pair_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feats = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let act = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.gen_range(0.0..1.0));
        let swap = |t: &Tensor| Tensor::stack(&[t.index_axis0(1), t.index_axis0(0)]);
        let a = ccam_loss(&feats, &act).unwrap();
        let b = ccam_loss(&swap(&feats), &swap(&act)).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(
            ccam_loss(&feats.index_axis0(0).reshape(&[1, 4, 3, 3]), &act.index_axis0(0).reshape(&[1, 1, 3, 3])),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn export_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let empty = export_pseudo_masks(&PseudoMaskSet::new(), dir.path()).unwrap();
        assert!(empty.is_empty());
        assert!(load_pseudo_masks(dir.path()).unwrap().is_empty());

        let mut set = PseudoMaskSet::new();
        set.insert("v1/0".into(), BinaryMask::from_fn(4, 4, |y, x| y < x));
        set.insert("v2/0".into(), BinaryMask::zeros(4, 4));
        let entries = export_pseudo_masks(&set, dir.path()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].path, "v1__0.png");
        assert!((entries[0].fg_pixel_fraction - 6.0 / 16.0).abs() < 1e-12);
        assert_eq!(load_pseudo_masks(dir.path()).unwrap(), set);
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("file");
        fs::write(&file, b"x").unwrap();
        let mut set = PseudoMaskSet::new();
        set.insert("a".into(), BinaryMask::zeros(2, 2));
        assert!(matches!(
            export_pseudo_masks(&set, &file.join("sub")),
            Err(Error::Io { .. })
        ));
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn positive_rescaling_keeps_the_mask(seed in 0u64..10_000, c in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = smap(4, 4, |_| rng.gen_range(0.0..1.0));
            let a = amap(2, 4, 4, |_| rng.gen_range(0.0..1.0));
            let base = refine_pseudo_mask(&s, &a, false).unwrap();
            let s2 = SaliencyMap::new(s.values.map(|v| v * c)).unwrap();
            let a2 = ClassAgnosticMap::new(a.values.map(|v| v * c)).unwrap();
            prop_assert_eq!(refine_pseudo_mask(&s2, &a2, false).unwrap(), base);
        }
    }
}
