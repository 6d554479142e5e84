//! Weakly-supervised audio-visual segmentation on the CPU.
//!
//! The crate covers the whole pipeline: log-magnitude spectrograms, audio and
//! multi-scale visual encoders, pixel-wise audio-visual fusion, multi-scale
//! multiple-instance contrastive losses, pseudo masks from class-agnostic
//! activation maps, an FPN-style decoder, mIoU / F-score evaluation, a
//! procedural toy dataset, and the training / sweep / plotting drivers used by
//! the `avseg` binary.

pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod pseudomask;
pub mod segmentation;
pub mod tensor;

pub use config::{Mode, Readout, RunConfig};
pub use error::{Error, Result};
pub use model::Model;
