//! FPN-style mask decoder and binarization.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::FusedFeatures;
use crate::mask::{BinaryMask, SoftMask};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Channel width of the top-down pathway.
    pub width: usize,
    /// Start the 1-channel head at zero, so an untrained decoder predicts 0.5.
    pub zero_init_head: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 16,
            zero_init_head: true,
        }
    }
}

pub struct Decoder {
    image_size: (usize, usize),
    dim: usize,
    laterals: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    head: Conv2d,
}

impl Decoder {
    pub fn new(
        cfg: &DecoderConfig,
        dim: usize,
        stages: usize,
        image_size: (usize, usize),
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let laterals = (0..stages)
            .map(|s| Conv2d::new(store, rng, &format!("decoder.lateral{s}"), dim, cfg.width, 1, 1, true))
            .collect();
        let smooth = (0..stages.saturating_sub(1))
            .map(|s| {
                Conv2d::new(store, rng, &format!("decoder.smooth{s}"), cfg.width, cfg.width, 3, 1, true)
            })
            .collect();
        let head = Conv2d::new(store, rng, "decoder.head", cfg.width, 1, 1, 1, true);
        if cfg.zero_init_head {
            store.get_mut(head.weight).data_mut().fill(0.0);
        }
        Self {
            image_size,
            dim,
            laterals,
            smooth,
            head,
        }
    }

    /// Fused stages `[B, D, H^s, W^s]` -> mask probabilities `[B, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: &[Var]) -> Var {
        let logits = self.logits(g, p, z);
        g.sigmoid(logits)
    }

    /// Pre-sigmoid output at image resolution.
    pub fn logits(&self, g: &mut Graph, p: &Bound, z: &[Var]) -> Var {
        let last = z.len() - 1;
        let mut top = self.laterals[last].forward(g, p, z[last]);
        for s in (0..last).rev() {
            let (h, w) = (g.shape(z[s])[2], g.shape(z[s])[3]);
            let up = g.upsample(top, h, w);
            let lat = self.laterals[s].forward(g, p, z[s]);
            let merged = g.add(up, lat);
            let sm = self.smooth[s].forward(g, p, merged);
            top = g.relu(sm);
        }
        let out = self.head.forward(g, p, top);
        g.upsample(out, self.image_size.0, self.image_size.1)
    }

    pub fn decode(&self, store: &ParamStore, z: &FusedFeatures) -> Result<SoftMask> {
        if z.stages.len() != self.laterals.len() {
            return Err(Error::shape(
                "decode",
                format!("{} stages", self.laterals.len()),
                format!("{} stages", z.stages.len()),
            ));
        }
        let mut prev: Option<(usize, usize)> = None;
        for t in &z.stages {
            if t.ndim() != 3 || t.shape()[0] != self.dim {
                return Err(Error::shape("decode stage", format!("[{}, h, w]", self.dim), t.shape()));
            }
            let hw = (t.shape()[1], t.shape()[2]);
            if let Some(p) = prev {
                if hw.0 > p.0 || hw.1 > p.1 || hw == p {
                    return Err(Error::Config(format!(
                        "inconsistent pyramid: stage of {hw:?} follows {p:?}"
                    )));
                }
            }
            prev = Some(hw);
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let vars: Vec<Var> = z
            .stages
            .iter()
            .map(|t| {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                g.constant(t.clone().reshape(&s))
            })
            .collect();
        let m = self.forward(&mut g, &p, &vars);
        SoftMask::from_tensor(g.value(m))
    }
}

/// Pixel is 1 iff `m >= threshold`.
pub fn binarize(m: &SoftMask, threshold: f64) -> BinaryMask {
    BinaryMask::new(
        m.height,
        m.width,
        m.values.iter().map(|&v| u8::from(v >= threshold)).collect(),
    )
    .expect("binarized values are 0 or 1")
}

/// Soft mask from a `[H, W]` tensor already in `[0, 1]`.
pub fn soft_from_plane(t: &Tensor) -> SoftMask {
    SoftMask::from_tensor(t).expect("plane values in [0, 1]")
}
