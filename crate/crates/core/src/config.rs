//! Run configuration: profiles, file loading and `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::AudioConfig;
use crate::encoders::{EncoderConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::losses::{LossWeights, DEFAULT_TEMPERATURE};
use crate::metrics::DEFAULT_BETA_SQ;
use crate::nn::AdamConfig;
use crate::pseudomask::{CcamBatching, DetectorConfig, PolarityRule, PseudoMaskConfig};
use crate::segmentation::DecoderConfig;

/// Which objectives are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Contrastive alignment plus pseudo-mask cross entropy.
    Weak,
    /// Cross entropy against ground-truth masks only.
    Supervised,
    /// Contrastive alignment only.
    AvfOnly,
    /// Pseudo-mask cross entropy only.
    PmrOnly,
}

impl Mode {
    pub fn uses_contrastive(self) -> bool {
        matches!(self, Mode::Weak | Mode::AvfOnly)
    }

    pub fn uses_mask_loss(self) -> bool {
        !matches!(self, Mode::AvfOnly)
    }

    pub fn uses_pseudo_masks(self) -> bool {
        matches!(self, Mode::Weak | Mode::PmrOnly)
    }
}

/// How a trained model turns a sample into a soft mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Decoder when a mask loss was trained, localization otherwise.
    Auto,
    Decoder,
    /// Audio-visual cosine maps averaged over stages, min-max scaled per image.
    Localization,
}

impl Readout {
    pub fn resolve(self, mode: Mode) -> Readout {
        match self {
            Readout::Auto if mode.uses_mask_loss() => Readout::Decoder,
            Readout::Auto => Readout::Localization,
            r => r,
        }
    }
}

/// Which features feed the contrastive similarities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityFeatures {
    PreFusion,
    Fused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub weights: LossWeights,
    pub similarity_features: SimilarityFeatures,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            weights: LossWeights::default(),
            similarity_features: SimilarityFeatures::PreFusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub beta_sq: f64,
    pub threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            beta_sq: DEFAULT_BETA_SQ,
            threshold: 0.5,
        }
    }
}

/// Dataset source: a directory tree, or the synthetic generator when `root`
/// is unset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub noise_level: f64,
    pub distractors: bool,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            n_classes: 4,
            samples_per_class: 50,
            noise_level: 0.05,
            distractors: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: String,
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub audio: AudioConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub pseudomask: PseudoMaskConfig,
    /// Visual encoder initialization before main training.
    pub pretrain: PretrainConfig,
    pub metrics: MetricConfig,
    pub data: DataConfig,
    pub readout: Readout,
    /// Evaluate on the validation split after every epoch.
    pub eval_each_epoch: bool,
    pub output_dir: PathBuf,
}

pub const PROFILES: [&str; 2] = ["full", "toy"];

impl RunConfig {
    /// Full-scale settings: 224x224 frames, 257x300 spectrograms, Adam at
    /// 1e-4, batch 64, 20 epochs.
    pub fn full() -> Self {
        let encoder = EncoderConfig::full_scale();
        Self {
            profile: "full".into(),
            mode: Mode::Weak,
            seed: 0,
            epochs: 20,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            audio: AudioConfig::full_scale(),
            pseudomask: PseudoMaskConfig {
                encoder: encoder.clone(),
                pretrain_epochs: 20,
                pretrain_lr: 1e-4,
                feature_stage: 0,
                channels: 1,
                epochs: 5,
                batch_size: 64,
                lr: 1e-4,
                batching: CcamBatching::ByLabel,
                invert_saliency_label: false,
                polarity: PolarityRule::BorderIsBackground,
                detector: Some(DetectorConfig {
                    width: 64,
                    epochs: 10,
                    batch_size: 64,
                    lr: 1e-4,
                }),
            },
            encoder,
            pretrain: PretrainConfig {
                epochs: 20,
                lr: 1e-4,
                batch_size: 64,
            },
            fusion: FusionConfig::default(),
            decoder: DecoderConfig {
                width: 128,
                zero_init_head: true,
            },
            loss: LossConfig::default(),
            metrics: MetricConfig::default(),
            data: DataConfig::default(),
            readout: Readout::Auto,
            eval_each_epoch: false,
            output_dir: PathBuf::from("runs"),
        }
    }

    /// Desk-scale settings: 64x64 frames and spectrograms, small encoders.
    pub fn toy() -> Self {
        Self {
            profile: "toy".into(),
            epochs: 40,
            batch_size: 16,
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            audio: AudioConfig::toy(),
            encoder: EncoderConfig::toy(),
            pseudomask: PseudoMaskConfig::toy(),
            pretrain: PretrainConfig {
                epochs: 20,
                lr: 5e-3,
                batch_size: 16,
            },
            decoder: DecoderConfig::default(),
            eval_each_epoch: true,
            ..Self::full()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected one of {PROFILES:?})"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("optimizer.lr must be > 0, got {}", self.optimizer.lr)));
        }
        let min_batch = if self.mode.uses_contrastive() { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "batch_size must be >= {min_batch} in mode {:?}, got {}",
                self.mode, self.batch_size
            )));
        }
        self.audio.validate()?;
        self.encoder.validate()?;
        let spec = (self.audio.freq_bins(), self.audio.target_frames);
        if self.encoder.spec_size != spec {
            return Err(Error::Config(format!(
                "encoder.spec_size {:?} does not match the audio front end {spec:?}",
                self.encoder.spec_size
            )));
        }
        self.pseudomask.validate()?;
        self.pretrain.validate()?;
        if self.pseudomask.encoder.image_size != self.encoder.image_size {
            return Err(Error::Config(
                "pseudomask.encoder.image_size must equal encoder.image_size".into(),
            ));
        }
        if !(self.loss.temperature > 0.0) {
            return Err(Error::Config("loss.temperature must be > 0".into()));
        }
        if !(self.metrics.beta_sq > 0.0) || !(0.0..=1.0).contains(&self.metrics.threshold) {
            return Err(Error::Config(
                "metrics.beta_sq must be > 0 and metrics.threshold in [0, 1]".into(),
            ));
        }
        if self.decoder.width == 0 {
            return Err(Error::Config("decoder.width must be >= 1".into()));
        }
        Ok(())
    }

    /// Profile defaults, then the file, then overrides in order. A `profile`
    /// argument takes precedence over a `profile` key in the file.
    pub fn load(file: Option<&Path>, profile: Option<&str>, overrides: &[String]) -> Result<Self> {
        let file_value = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_file(p, &text)?
            }
            None => Value::Object(Default::default()),
        };
        let profile = profile
            .map(str::to_string)
            .or_else(|| file_value.get("profile").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| "full".into());
        let mut merged = serde_json::to_value(Self::profile(&profile)?)?;
        merge(&mut merged, &file_value, "")?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            set_path(&mut merged, key.trim(), parse_scalar(raw.trim()))?;
        }
        merged["profile"] = Value::String(profile);
        let cfg: RunConfig = serde_json::from_value(merged)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

fn parse_file(path: &Path, text: &str) -> Result<Value> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        return serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())));
    }
    let t: toml::Table =
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::to_value(t)?)
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, over: &Value, prefix: &str) -> Result<()> {
    let Value::Object(items) = over else {
        *base = over.clone();
        return Ok(());
    };
    let Value::Object(target) = base else {
        *base = over.clone();
        return Ok(());
    };
    for (k, v) in items {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match target.get_mut(k) {
            Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &path)?,
            Some(slot) => *slot = v.clone(),
            None => return Err(Error::Config(format!("unknown config key {path:?}"))),
        }
    }
    Ok(())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(Error::Config(format!("config key {key:?} does not name a table")));
        };
        let Some(next) = map.get_mut(*part) else {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        };
        if i + 1 == parts.len() {
            *next = value;
            return Ok(());
        }
        cur = next;
    }
    Err(Error::Config("empty config key".into()))
}
