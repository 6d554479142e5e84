//! Audio and multi-scale visual encoders with projection heads to a common width.
//!
//! The visual backbone is a strided convolution stack: a stride-2 stem followed
//! by one stride-2 block per stage, so stage `s` (1-based) sits at `1 / 2^(s+1)`
//! of the input resolution (/4, /8, /16, /32). Every stage ends in its own 1x1
//! projection head to `dim` channels. The audio backbone is a stride-2 stack over
//! the spectrogram followed by global average pooling and a linear head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::autograd::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Bound, Conv2d, Linear, ParamStore};
use crate::tensor::Tensor;

pub const MAX_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Shared embedding width `D`.
    pub dim: usize,
    /// Number of visual stages `S` (1..=4).
    pub stages: usize,
    /// Image height and width.
    pub image_size: (usize, usize),
    /// Spectrogram frequency bands and time steps.
    pub spec_size: (usize, usize),
    pub stem_width: usize,
    /// Backbone width of each visual stage; only the first `stages` are used.
    pub stage_widths: Vec<usize>,
    pub audio_widths: Vec<usize>,
    /// Separate projection head per stage (otherwise one head shared by all
    /// stages, which requires equal stage widths).
    pub per_stage_heads: bool,
    /// Border handling of the visual convolutions.
    #[serde(default)]
    pub padding: Padding,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            dim: 16,
            stages: 4,
            image_size: (64, 64),
            spec_size: (64, 64),
            stem_width: 8,
            stage_widths: vec![16, 24, 32, 32],
            audio_widths: vec![8, 16, 16],
            per_stage_heads: true,
            padding: Padding::Zeros,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            dim: 128,
            stages: 4,
            image_size: (224, 224),
            spec_size: (257, 300),
            stem_width: 32,
            stage_widths: vec![64, 128, 256, 256],
            audio_widths: vec![32, 64, 128, 128],
            per_stage_heads: true,
            padding: Padding::Zeros,
        }
    }

    /// Downsampling factor of stage `s` (0-based).
    pub fn stage_stride(s: usize) -> usize {
        1 << (s + 2)
    }

    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.stages)
            .map(|s| {
                let f = Self::stage_stride(s);
                (self.image_size.0 / f, self.image_size.1 / f)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("encoder.dim must be >= 2, got {}", self.dim)));
        }
        if !(1..=MAX_STAGES).contains(&self.stages) {
            return Err(Error::Config(format!(
                "encoder.stages must be in 1..=4, got {}",
                self.stages
            )));
        }
        if self.stage_widths.len() < self.stages {
            return Err(Error::Config(format!(
                "encoder.stage_widths has {} entries, need {}",
                self.stage_widths.len(),
                self.stages
            )));
        }
        let f = Self::stage_stride(self.stages - 1);
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be divisible by {f} for {} stages",
                self.stages
            )));
        }
        if self.audio_widths.is_empty() {
            return Err(Error::Config("encoder.audio_widths must not be empty".into()));
        }
        let (fb, t) = self.spec_size;
        let down = 1 << self.audio_widths.len();
        if fb < down || t < down {
            return Err(Error::Config(format!(
                "spectrogram {fb}x{t} too small for {} audio blocks",
                self.audio_widths.len()
            )));
        }
        if !self.per_stage_heads
            && self.stage_widths[..self.stages]
                .iter()
                .any(|&w| w != self.stage_widths[0])
        {
            return Err(Error::Config(
                "a shared projection head needs equal stage widths".into(),
            ));
        }
        Ok(())
    }
}

/// The `D`-dimensional audio vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalAudioEmbedding {
    pub vector: Vec<f64>,
}

impl GlobalAudioEmbedding {
    pub fn new(vector: Vec<f64>) -> Self {
        Self { vector }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Per-stage feature maps, stage `s` of shape `[D, H^s, W^s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleVisualFeatures {
    pub stages: Vec<Tensor>,
}

impl MultiScaleVisualFeatures {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        let f = Self { stages };
        f.validate()?;
        Ok(f)
    }

    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        self.stages.iter().map(|t| (t.shape()[1], t.shape()[2])).collect()
    }

    pub fn dim(&self) -> usize {
        self.stages[0].shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.len() > MAX_STAGES {
            return Err(Error::Config(format!(
                "expected 1..=4 stages, got {}",
                self.stages.len()
            )));
        }
        let d = self.stages[0].shape()[0];
        for t in &self.stages {
            if t.ndim() != 3 || t.shape()[0] != d {
                return Err(Error::shape("visual stage", format!("[{d}, h, w]"), t.shape()));
            }
        }
        for pair in self.stage_shapes().windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h1 > h0 || w1 > w0 || (h1 == h0 && w1 == w0) {
                return Err(Error::Config(format!(
                    "stage sizes must decrease: {h0}x{w0} then {h1}x{w1}"
                )));
            }
        }
        Ok(())
    }
}

pub struct AudioEncoder {
    cfg: EncoderConfig,
    blocks: Vec<Conv2d>,
    head: Linear,
}

impl AudioEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 1;
        let blocks = cfg
            .audio_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(store, rng, &format!("audio.block{i}"), cin, w, 3, 2, true);
                cin = w;
                c
            })
            .collect();
        let head = Linear::new(store, rng, "audio.head", cin, cfg.dim, true);
        Self {
            cfg: cfg.clone(),
            blocks,
            head,
        }
    }

    /// `[B, 1, F, T] -> [B, D]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, spec: Var) -> Var {
        let mut x = spec;
        for b in &self.blocks {
            x = b.forward(g, p, x);
            x = g.relu(x);
        }
        let pooled = g.global_avg_pool(x);
        self.head.forward(g, p, pooled)
    }

    pub fn encode(&self, store: &ParamStore, s: &Spectrogram) -> Result<GlobalAudioEmbedding> {
        let want = self.cfg.spec_size;
        if (s.freq_bins, s.time_steps) != want {
            return Err(Error::Config(format!(
                "spectrogram shape mismatch: expected {}x{}, got {}x{}",
                want.0, want.1, s.freq_bins, s.time_steps
            )));
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(s.to_tensor().reshape(&[1, 1, want.0, want.1]));
        let out = self.forward(&mut g, &p, x);
        Ok(GlobalAudioEmbedding::new(g.value(out).data().to_vec()))
    }
}

pub struct VisualEncoder {
    cfg: EncoderConfig,
    stem: Conv2d,
    stages: Vec<Vec<Conv2d>>,
    heads: Vec<Conv2d>,
}

impl VisualEncoder {
    pub fn new(
        cfg: &EncoderConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stem = Conv2d::new(store, rng, &format!("{prefix}.stem"), 3, cfg.stem_width, 3, 2, true)
            .with_padding(cfg.padding);
        let mut cin = cfg.stem_width;
        let mut stages = Vec::new();
        let mut heads = Vec::new();
        for s in 0..cfg.stages {
            let w = cfg.stage_widths[s];
            let mut convs = vec![Conv2d::new(
                store,
                rng,
                &format!("{prefix}.stage{s}.down"),
                cin,
                w,
                3,
                2,
                true,
            )
            .with_padding(cfg.padding)];
            if s == 0 {
                convs.push(Conv2d::new(
                    store,
                    rng,
                    &format!("{prefix}.stage{s}.conv"),
                    w,
                    w,
                    3,
                    1,
                    true,
                )
                .with_padding(cfg.padding));
            }
            stages.push(convs);
            if cfg.per_stage_heads || s == 0 {
                heads.push(Conv2d::new(
                    store,
                    rng,
                    &format!("{prefix}.head{s}"),
                    w,
                    cfg.dim,
                    1,
                    1,
                    true,
                ));
            }
            cin = w;
        }
        Self {
            cfg: cfg.clone(),
            stem,
            stages,
            heads,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `[B, 3, H, W] -> S` maps of shape `[B, D, H^s, W^s]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Vec<Var> {
        let x = self.stem.forward(g, p, image);
        let mut x = g.relu(x);
        let mut out = Vec::with_capacity(self.stages.len());
        for (s, convs) in self.stages.iter().enumerate() {
            for c in convs {
                x = c.forward(g, p, x);
                x = g.relu(x);
            }
            let head = &self.heads[if self.cfg.per_stage_heads { s } else { 0 }];
            out.push(head.forward(g, p, x));
        }
        out
    }

    /// Single image `[3, H, W]` in `[0, 1]`.
    pub fn encode(&self, store: &ParamStore, image: &Tensor) -> Result<MultiScaleVisualFeatures> {
        check_image(image, self.cfg.image_size)?;
        let (h, w) = self.cfg.image_size;
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(image.clone().reshape(&[1, 3, h, w]));
        let stages = self.forward(&mut g, &p, x);
        MultiScaleVisualFeatures::new(
            stages
                .iter()
                .map(|&v| {
                    let t = g.value(v);
                    t.index_axis0(0)
                })
                .collect(),
        )
    }
}

pub fn check_image(image: &Tensor, size: (usize, usize)) -> Result<()> {
    let want = [3, size.0, size.1];
    if image.shape() != want {
        return Err(Error::Config(format!(
            "image shape mismatch: expected {want:?}, got {:?}",
            image.shape()
        )));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("image values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Classification pretraining of a visual encoder on instance labels, the
/// stand-in for a backbone pretrained on a large labeled image corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// 0 disables pretraining.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && (!(self.lr > 0.0) || self.batch_size == 0) {
            return Err(Error::Config("pretraining needs lr > 0 and batch_size >= 1".into()));
        }
        Ok(())
    }
}

/// One-vs-rest classification of `labels` from globally pooled, rectified
/// deepest-stage features. Only `encoder`'s parameters in `store` change; the
/// classifier is discarded. Returns the mean loss per epoch.
pub fn pretrain_classifier(
    encoder: &VisualEncoder,
    store: &mut ParamStore,
    images: &[Tensor],
    labels: &[usize],
    cfg: &PretrainConfig,
    seed: u64,
    tag: &str,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if labels.len() != images.len() {
        return Err(Error::shape("instance labels", images.len(), labels.len()));
    }
    if cfg.epochs == 0 || images.is_empty() {
        return Ok(Vec::new());
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let keep = store.len();
    let mut work = store.clone();
    let mut rng = component_rng(seed, &format!("{tag}-classifier"));
    let classifier = Linear::new(&mut work, &mut rng, &format!("{tag}.classifier"), encoder.cfg.dim, n_classes, true);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &work,
    );
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut component_rng(seed, &format!("{tag}-pretrain{epoch}")));
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Tensor::stack(&chunk.iter().map(|&i| images[i].clone()).collect::<Vec<_>>());
            let target = Tensor::from_fn(&[chunk.len(), n_classes], |k| {
                f64::from(u8::from(labels[chunk[k / n_classes]] == k % n_classes))
            });
            let mut g = Graph::new();
            let p = work.bind(&mut g);
            let x = g.constant(batch);
            let stages = encoder.forward(&mut g, &p, x);
            let deepest = g.relu(*stages.last().expect("at least one stage"));
            let pooled = g.global_avg_pool(deepest);
            let logits = classifier.forward(&mut g, &p, pooled);
            let prob = g.sigmoid(logits);
            let loss = g.bce(prob, &target);
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
            opt.step(&mut work, &grads);
        }
        let mean = total / steps.max(1) as f64;
        log::debug!("{tag} pretrain epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
    }
    work.truncate(keep);
    *store = work;
    Ok(losses)
}

/// Deterministic parameter RNG for a component seeded from the run seed.
pub fn component_rng(seed: u64, component: &str) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in component.bytes() {
        h = h.rotate_left(5) ^ u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}
