//! Pixel-wise audio-visual fusion and max-pooled audio-visual similarity.
//!
//! For a stage map `v: [D, H, W]` and audio vector `a: [D]`, with `P = H * W` and
//! every map flattened to `[D, P]`:
//!
//! ```text
//! att = θ(v)ᵀ · φ(â) / P            // [P, P], â = a repeated at every location
//! y   = ω(v) · attᵀ                 // [D, P], i.e. (att · ω(v)ᵀ)ᵀ
//! z   = v + μ(y)
//! ```
//!
//! `θ, φ, ω, μ` are bias-free 1x1 convolutions `D -> D` (biases are a config
//! flag). The attention is not softmax-normalized.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, COS_EPS};
use crate::encoders::{GlobalAudioEmbedding, MultiScaleVisualFeatures};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Bias terms on θ, φ, ω, μ.
    pub bias: bool,
    /// Start μ at zero so fusion is the identity at initialization.
    pub zero_init_mu: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            bias: false,
            zero_init_mu: true,
        }
    }
}

struct StageFusion {
    mu: Conv2d,
    theta: Conv2d,
    phi: Conv2d,
    omega: Conv2d,
}

/// Per-stage fusion projections.
pub struct Fusion {
    dim: usize,
    stages: Vec<StageFusion>,
}

impl Fusion {
    pub fn new(
        cfg: &FusionConfig,
        dim: usize,
        stages: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stages = (0..stages)
            .map(|s| {
                let mut proj = |name: &str| {
                    Conv2d::new(store, rng, &format!("fusion{s}.{name}"), dim, dim, 1, 1, cfg.bias)
                };
                let sf = StageFusion {
                    theta: proj("theta"),
                    phi: proj("phi"),
                    omega: proj("omega"),
                    mu: proj("mu"),
                };
                if cfg.zero_init_mu {
                    store.get_mut(sf.mu.weight).data_mut().fill(0.0);
                }
                sf
            })
            .collect();
        Self { dim, stages }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// The four projections of stage `s`: `(mu, theta, phi, omega)` weight ids.
    pub fn stage_params(&self, s: usize) -> [&Conv2d; 4] {
        let sf = &self.stages[s];
        [&sf.mu, &sf.theta, &sf.phi, &sf.omega]
    }

    /// Batched update of one stage: `v: [B, D, H, W]`, `a: [B, D]`.
    pub fn forward_stage(&self, g: &mut Graph, p: &Bound, v: Var, a: Var, s: usize) -> Var {
        let sf = &self.stages[s];
        let shape = g.shape(v).to_vec();
        let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let dup = g.duplicate_spatial(a, h, w);
        let th = sf.theta.forward(g, p, v);
        let th = g.reshape(th, &[b, d, hw]);
        let ph = sf.phi.forward(g, p, dup);
        let ph = g.reshape(ph, &[b, d, hw]);
        let om = sf.omega.forward(g, p, v);
        let om = g.reshape(om, &[b, d, hw]);
        let att = g.bmm(th, ph, true, false);
        let att = g.scale(att, 1.0 / hw as f64);
        let y = g.bmm(om, att, false, true);
        let y = g.reshape(y, &[b, d, h, w]);
        let y = sf.mu.forward(g, p, y);
        g.add(v, y)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, stages: &[Var], a: Var) -> Vec<Var> {
        stages
            .iter()
            .enumerate()
            .map(|(s, &v)| self.forward_stage(g, p, v, a, s))
            .collect()
    }

    /// One stage, one sample.
    pub fn fuse_stage(
        &self,
        store: &ParamStore,
        v: &Tensor,
        a: &GlobalAudioEmbedding,
        s: usize,
    ) -> Result<Tensor> {
        if s >= self.stages.len() {
            return Err(Error::Config(format!(
                "stage index {s} out of range for {} fusion stages",
                self.stages.len()
            )));
        }
        if v.ndim() != 3 || v.shape()[0] != self.dim || a.dim() != self.dim {
            return Err(Error::shape(
                "fuse_stage",
                format!("v [{0}, h, w] and a [{0}]", self.dim),
                format!("v {:?}, a [{}]", v.shape(), a.dim()),
            ));
        }
        let (h, w) = (v.shape()[1], v.shape()[2]);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let vv = g.constant(v.clone().reshape(&[1, self.dim, h, w]));
        let av = g.constant(Tensor::new(vec![1, self.dim], a.vector.clone()));
        let z = self.forward_stage(&mut g, &p, vv, av, s);
        Ok(g.value(z).index_axis0(0))
    }

    pub fn fuse_all(
        &self,
        store: &ParamStore,
        v: &MultiScaleVisualFeatures,
        a: &GlobalAudioEmbedding,
    ) -> Result<FusedFeatures> {
        if v.stages.len() != self.stages.len() {
            return Err(Error::shape(
                "fuse_all",
                format!("{} stages", self.stages.len()),
                format!("{} stages", v.stages.len()),
            ));
        }
        let stages = v
            .stages
            .iter()
            .enumerate()
            .map(|(s, t)| self.fuse_stage(store, t, a, s))
            .collect::<Result<_>>()?;
        Ok(FusedFeatures { stages })
    }
}

/// Fused maps `z^s`, same shapes as the visual stages.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub stages: Vec<Tensor>,
}

/// `a` repeated at each of `h x w` locations: `[D, h, w]`.
pub fn duplicate_audio(a: &GlobalAudioEmbedding, h: usize, w: usize) -> Tensor {
    assert!(h >= 1 && w >= 1);
    let mut data = Vec::with_capacity(a.dim() * h * w);
    for &x in &a.vector {
        data.extend(std::iter::repeat(x).take(h * w));
    }
    Tensor::new(vec![a.dim(), h, w], data)
}

/// Max over spatial locations of the cosine similarity between `a` and the
/// local vectors of `v: [D, H, W]`. Zero visual vectors score 0.
pub fn max_pooled_similarity(a: &GlobalAudioEmbedding, v: &Tensor) -> Result<f64> {
    if v.ndim() != 3 || v.shape()[0] != a.dim() {
        return Err(Error::shape(
            "max_pooled_similarity",
            format!("[{}, h, w]", a.dim()),
            v.shape(),
        ));
    }
    if a.vector.iter().map(|x| x * x).sum::<f64>().sqrt() <= COS_EPS {
        return Err(Error::DegenerateAudio);
    }
    let mut g = Graph::new();
    let av = g.constant(Tensor::new(vec![1, a.dim()], a.vector.clone()));
    let vv = g.constant(v.clone().reshape(&[1, v.shape()[0], v.shape()[1], v.shape()[2]]));
    let s = g.max_cos_sim(av, vv);
    Ok(g.value(s).item())
}

/// Cosine similarity of `a` with every location of `v: [D, H, W]`, as `[H, W]`.
pub fn similarity_map(a: &[f64], v: &Tensor) -> Tensor {
    let (d, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    assert_eq!(a.len(), d);
    let p = h * w;
    let an = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
    Tensor::from_fn(&[h, w], |loc| {
        let (mut dot, mut vn) = (0.0, 0.0);
        for (c, &ac) in a.iter().enumerate() {
            let x = v.data()[c * p + loc];
            dot += ac * x;
            vn += x * x;
        }
        dot / (an * vn.sqrt().max(COS_EPS))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::component_rng;
    use rand::{Rng, SeedableRng};

    fn identity_fusion(dim: usize) -> (Fusion, ParamStore) {
        let mut store = ParamStore::new();
        let f = Fusion::new(
            &FusionConfig {
                bias: false,
                zero_init_mu: false,
            },
            dim,
            1,
            &mut store,
            &mut component_rng(0, "fusion"),
        );
        for conv in f.stage_params(0) {
            let w = store.get_mut(conv.weight);
            w.data_mut().fill(0.0);
            for i in 0..dim {
                w.data_mut()[i * dim + i] = 1.0;
            }
        }
        (f, store)
    }

    #[test]
    fn duplicate_audio_repeats_vector() {
        let a = GlobalAudioEmbedding::new(vec![1.0, 2.0, 3.0]);
        let m = duplicate_audio(&a, 2, 2);
        assert_eq!(m.shape(), &[3, 2, 2]);
        for loc in 0..4 {
            let col: Vec<f64> = (0..3).map(|c| m.data()[c * 4 + loc]).collect();
            assert_eq!(col, vec![1.0, 2.0, 3.0]);
        }
        assert_eq!(duplicate_audio(&a, 1, 1).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn scalar_fusion_hand_value() {
        let (f, store) = identity_fusion(1);
        let v = Tensor::new(vec![1, 1, 1], vec![2.0]);
        let a = GlobalAudioEmbedding::new(vec![3.0]);
        let z = f.fuse_stage(&store, &v, &a, 0).unwrap();
        assert_eq!(z.data(), &[14.0]);
    }

    #[test]
    fn zero_mu_is_identity_and_uniform_stays_uniform() {
        let mut store = ParamStore::new();
        let f = Fusion::new(&FusionConfig::default(), 4, 1, &mut store, &mut component_rng(1, "f"));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Tensor::from_fn(&[4, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let a = GlobalAudioEmbedding::new(vec![0.5, -0.2, 0.1, 0.9]);
        assert_eq!(f.fuse_stage(&store, &v, &a, 0).unwrap(), v);

        // Non-zero μ on a spatially uniform map.
        let mut store = ParamStore::new();
        let f = Fusion::new(
            &FusionConfig {
                bias: false,
                zero_init_mu: false,
            },
            4,
            1,
            &mut store,
            &mut component_rng(1, "f"),
        );
        let col = [0.3, -0.7, 0.2, 0.5];
        let u = Tensor::from_fn(&[4, 3, 3], |i| col[i / 9]);
        let z = f.fuse_stage(&store, &u, &a, 0).unwrap();
        for c in 0..4 {
            let plane = &z.data()[c * 9..(c + 1) * 9];
            assert!(plane.iter().all(|x| (x - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn fuse_stage_shape_errors() {
        let (f, store) = identity_fusion(2);
        let a = GlobalAudioEmbedding::new(vec![1.0, 0.0, 0.0]);
        let v = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(
            f.fuse_stage(&store, &v, &a, 0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn similarity_examples() {
        let a = GlobalAudioEmbedding::new(vec![1.0, 0.0]);
        let v = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(max_pooled_similarity(&a, &v).unwrap(), 1.0);
        let anti = Tensor::new(vec![2, 1, 2], vec![-1.0, -1.0, 0.0, 0.0]);
        assert_eq!(max_pooled_similarity(&a, &anti).unwrap(), -1.0);
        let zero_a = GlobalAudioEmbedding::new(vec![0.0, 0.0]);
        assert!(matches!(
            max_pooled_similarity(&zero_a, &v),
            Err(Error::DegenerateAudio)
        ));
        // A zero location scores 0 instead of NaN.
        let with_zero = Tensor::new(vec![2, 1, 2], vec![-1.0, 0.0, 0.0, 0.0]);
        assert_eq!(max_pooled_similarity(&a, &with_zero).unwrap(), 0.0);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn similarity_scale_and_permutation_invariant(
            seed in 0u64..10_000,
            c in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v = Tensor::from_fn(&[4, 3, 3], |_| rng.gen_range(-1.0..1.0));
            let base = max_pooled_similarity(&GlobalAudioEmbedding::new(a.clone()), &v).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
            let scaled = GlobalAudioEmbedding::new(a.iter().map(|x| x * c).collect());
            prop_assert!((max_pooled_similarity(&scaled, &v).unwrap() - base).abs() < 1e-12);
            // Reverse the spatial order of every channel.
            let rev = Tensor::from_fn(&[4, 3, 3], |i| v.data()[(i / 9) * 9 + 8 - i % 9]);
            let again = max_pooled_similarity(&GlobalAudioEmbedding::new(a), &rev).unwrap();
            prop_assert!((again - base).abs() < 1e-12);
        }
    }
}
