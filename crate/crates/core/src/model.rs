//! The segmentation network: audio and visual encoders, fusion, decoder.

use serde::Serialize;

use crate::audio::{compute_spectrogram, AudioConfig, Spectrogram, Waveform};
use crate::autograd::{Graph, Var};
use crate::checkpoint::config_hash;
use crate::config::{Readout, RunConfig};
use crate::encoders::{
    check_image, component_rng, pretrain_classifier, AudioEncoder, EncoderConfig, GlobalAudioEmbedding,
    MultiScaleVisualFeatures, PretrainConfig, VisualEncoder,
};
use crate::error::Result;
use crate::fusion::{similarity_map, FusedFeatures, Fusion, FusionConfig};
use crate::mask::SoftMask;
use crate::nn::{Bound, ParamStore};
use crate::segmentation::{Decoder, DecoderConfig};
use crate::tensor::{resize_bilinear, Tensor};

/// The parts of a run configuration that determine parameter layout and
/// preprocessing; checkpoints are keyed by its hash.
#[derive(Clone, Debug, Serialize)]
pub struct ModelConfig {
    pub audio: AudioConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
}

impl From<&RunConfig> for ModelConfig {
    fn from(c: &RunConfig) -> Self {
        Self {
            audio: c.audio.clone(),
            encoder: c.encoder.clone(),
            fusion: c.fusion.clone(),
            decoder: c.decoder.clone(),
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    audio: AudioEncoder,
    visual: VisualEncoder,
    fusion: Fusion,
    decoder: Decoder,
}

/// Tape handles of one forward pass.
pub struct ForwardVars {
    /// `[B, D]`
    pub audio: Var,
    /// Per stage `[B, D, H^s, W^s]`.
    pub visual: Vec<Var>,
    pub fused: Vec<Var>,
    /// `[B, 1, H, W]` probabilities.
    pub mask: Var,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.audio.validate()?;
        cfg.encoder.validate()?;
        let mut store = ParamStore::new();
        let e = &cfg.encoder;
        let audio = AudioEncoder::new(e, &mut store, &mut component_rng(seed, "audio"));
        let visual = VisualEncoder::new(e, "visual", &mut store, &mut component_rng(seed, "visual"));
        let fusion = Fusion::new(&cfg.fusion, e.dim, e.stages, &mut store, &mut component_rng(seed, "fusion"));
        let decoder = Decoder::new(
            &cfg.decoder,
            e.dim,
            e.stages,
            e.image_size,
            &mut store,
            &mut component_rng(seed, "decoder"),
        );
        Ok(Self {
            cfg: cfg.clone(),
            store,
            audio,
            visual,
            fusion,
            decoder,
        })
    }

    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        Self::new(&ModelConfig::from(cfg), cfg.seed)
    }

    /// Classification pretraining of the visual encoder on instance labels.
    pub fn pretrain_visual(
        &mut self,
        images: &[Tensor],
        labels: &[usize],
        cfg: &PretrainConfig,
        seed: u64,
    ) -> Result<Vec<f64>> {
        pretrain_classifier(&self.visual, &mut self.store, images, labels, cfg, seed, "visual")
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.cfg).expect("model config serializes")
    }

    pub fn audio_encoder(&self) -> &AudioEncoder {
        &self.audio
    }

    pub fn visual_encoder(&self) -> &VisualEncoder {
        &self.visual
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// `specs: [B, 1, F, T]`, `images: [B, 3, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, specs: Var, images: Var) -> ForwardVars {
        let audio = self.audio.forward(g, p, specs);
        let visual = self.visual.forward(g, p, images);
        let fused = self.fusion.forward(g, p, &visual, audio);
        let mask = self.decoder.forward(g, p, &fused);
        ForwardVars {
            audio,
            visual,
            fused,
            mask,
        }
    }

    pub fn spectrogram(&self, w: &Waveform) -> Result<Spectrogram> {
        compute_spectrogram(w, &self.cfg.audio)
    }

    pub fn encode_audio(&self, s: &Spectrogram) -> Result<GlobalAudioEmbedding> {
        self.audio.encode(&self.store, s)
    }

    pub fn encode_visual(&self, image: &Tensor) -> Result<MultiScaleVisualFeatures> {
        self.visual.encode(&self.store, image)
    }

    pub fn fuse(&self, v: &MultiScaleVisualFeatures, a: &GlobalAudioEmbedding) -> Result<FusedFeatures> {
        self.fusion.fuse_all(&self.store, v, a)
    }

    /// Decoder output for one sample.
    pub fn predict(&self, w: &Waveform, image: &Tensor) -> Result<SoftMask> {
        let s = self.spectrogram(w)?;
        let a = self.encode_audio(&s)?;
        let v = self.encode_visual(image)?;
        let z = self.fuse(&v, &a)?;
        self.decoder.decode(&self.store, &z)
    }

    /// Cosine similarity between the audio vector and every visual location,
    /// upsampled to the image, averaged over stages and min-max scaled to
    /// `[0, 1]` (a constant map becomes 0.5).
    pub fn localize(&self, w: &Waveform, image: &Tensor) -> Result<SoftMask> {
        let s = self.spectrogram(w)?;
        let a = self.encode_audio(&s)?;
        let v = self.encode_visual(image)?;
        let (h, wd) = self.cfg.encoder.image_size;
        let mut acc = Tensor::zeros(&[h, wd]);
        for stage in &v.stages {
            acc.add_assign(&resize_bilinear(&similarity_map(&a.vector, stage), h, wd));
        }
        let lo = acc.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = acc.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scaled = if hi - lo < 1e-12 {
            Tensor::full(&[h, wd], 0.5)
        } else {
            acc.map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0))
        };
        SoftMask::from_tensor(&scaled)
    }

    pub fn readout(&self, readout: Readout, w: &Waveform, image: &Tensor) -> Result<SoftMask> {
        check_image(image, self.cfg.encoder.image_size)?;
        match readout {
            Readout::Localization => self.localize(w, image),
            _ => self.predict(w, image),
        }
    }
}
