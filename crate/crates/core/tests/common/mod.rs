//! Shared helpers: brute-force oracles written without the library's kernels,
//! random inputs and a central-difference gradient check.

#![allow(dead_code)]

use avseg::autograd::{Graph, Var};
use avseg::mask::BinaryMask;
use avseg::nn::{Bound, ParamStore};
use avseg::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    let values = (0..h * w).map(|_| u8::from(rng.gen_bool(p))).collect();
    BinaryMask::new(h, w, values).unwrap()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a).max(1e-8) * norm(b).max(1e-8))
}

/// Column `loc` of a `[D, H, W]` map as a vector.
pub fn location(v: &[f64], d: usize, plane: usize, loc: usize) -> Vec<f64> {
    (0..d).map(|c| v[c * plane + loc]).collect()
}

/// `max_loc cos(a, v[:, loc])` by explicit loops.
pub fn max_sim_oracle(a: &[f64], v: &Tensor) -> f64 {
    let (d, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let mut best = f64::NEG_INFINITY;
    for loc in 0..h * w {
        best = best.max(cosine(a, &location(v.data(), d, h * w, loc)));
    }
    best
}

/// Audio-to-visual plus visual-to-audio InfoNCE over max-pooled similarities,
/// summed over stages. `audio: [B, D]`, `visual[s]: [B, D, H, W]`.
pub fn avf_oracle(audio: &Tensor, visual: &[Tensor], tau: f64) -> (f64, f64) {
    let (b, d) = (audio.shape()[0], audio.shape()[1]);
    let (mut a2v, mut v2a) = (0.0, 0.0);
    for v in visual {
        let (h, w) = (v.shape()[2], v.shape()[3]);
        let per = d * h * w;
        let mut s = vec![vec![0.0; b]; b];
        for i in 0..b {
            let a = &audio.data()[i * d..(i + 1) * d];
            for (j, row) in s[i].iter_mut().enumerate() {
                let vj = Tensor::new(vec![d, h, w], v.data()[j * per..(j + 1) * per].to_vec());
                *row = max_sim_oracle(a, &vj);
            }
        }
        for i in 0..b {
            let row: f64 = (0..b).map(|j| (s[i][j] / tau).exp()).sum();
            a2v -= ((s[i][i] / tau).exp() / row).ln() / b as f64;
            let col: f64 = (0..b).map(|j| (s[j][i] / tau).exp()).sum();
            v2a -= ((s[i][i] / tau).exp() / col).ln() / b as f64;
        }
    }
    (a2v, v2a)
}

/// Per pixel: argmax over `[S; A]` with ties to the lowest channel, label 0 for
/// the saliency channel and 1 for activation channels (swapped when `invert`).
pub fn refine_oracle(s: &Tensor, a: &Tensor, invert: bool) -> Vec<u8> {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut best = s.data()[y * w + x];
            let mut arg = 0;
            for ch in 0..c {
                let v = a.data()[(ch * h + y) * w + x];
                if v > best {
                    best = v;
                    arg = ch + 1;
                }
            }
            let fg = arg > 0;
            out.push(u8::from(fg != invert));
        }
    }
    out
}

fn counts(pred: &BinaryMask, gt: &BinaryMask) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for y in 0..gt.height {
        for x in 0..gt.width {
            match (pred.get(y, x), gt.get(y, x)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    (tp, fp, fn_)
}

pub fn iou_oracle(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (tp, fp, fn_) = counts(pred, gt);
    if tp + fp + fn_ == 0.0 {
        1.0
    } else {
        tp / (tp + fp + fn_)
    }
}

pub fn f_oracle(pred: &BinaryMask, gt: &BinaryMask, beta_sq: f64) -> f64 {
    let (tp, fp, fn_) = counts(pred, gt);
    if tp + fp + fn_ == 0.0 {
        return 1.0;
    }
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / (tp + fp);
    let r = tp / (tp + fn_);
    (1.0 + beta_sq) * p * r / (beta_sq * p + r)
}

/// Relative error between the tape gradient of `f` and central differences,
/// over every parameter in `store` and every input tensor.
pub fn grad_check(
    store: &ParamStore,
    inputs: &[Tensor],
    f: &dyn Fn(&mut Graph, &Bound, &[Var]) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&mut g, &p, &xs);
    let mut grads = g.backward(y);
    let mut analytic: Vec<f64> = Vec::new();
    for (gp, (_, t)) in p.gradients(&mut grads).into_iter().zip(store.iter()) {
        analytic.extend(gp.map_or_else(|| vec![0.0; t.len()], |x| x.data().to_vec()));
    }
    for (&x, t) in xs.iter().zip(inputs) {
        analytic.extend(grads.get(x).map_or_else(|| vec![0.0; t.len()], |x| x.data().to_vec()));
    }

    let eval = |store: &ParamStore, inputs: &[Tensor]| {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &p, &xs);
        g.value(y).item()
    };
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(analytic.len());
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        for j in 0..store.by_name(name).unwrap().len() {
            let mut plus = store.clone();
            plus.by_name_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = store.clone();
            minus.by_name_mut(name).unwrap().data_mut()[j] -= h;
            numeric.push((eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * h));
        }
    }
    for k in 0..inputs.len() {
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            numeric.push((eval(store, &plus) - eval(store, &minus)) / (2.0 * h));
        }
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12)
}

/// Weighted sum `Σ x ⊙ r` turning any tensor output into a scalar probe.
fn probe(g: &mut Graph, x: Var, r: &Tensor) -> Var {
    let rv = g.constant(r.clone());
    let m = g.mul(x, rv);
    g.sum(m)
}

pub const GRADIENT_SUITES: [&str; 5] = ["a2v", "v2a", "mask_bce", "fuse_stage", "decode"];

/// Relative FD error of one random instance of the named gradient.
pub fn gradient_instance(kind: &str, seed: u64) -> f64 {
    use avseg::fusion::{Fusion, FusionConfig};
    use avseg::losses::{contrastive_on_tape, Direction};
    use avseg::segmentation::{Decoder, DecoderConfig};
    use rand::SeedableRng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        "a2v" | "v2a" => {
            let dir = if kind == "a2v" {
                Direction::AudioToVisual
            } else {
                Direction::VisualToAudio
            };
            let b = rng.gen_range(2..5);
            let d = rng.gen_range(2..5);
            let stages = rng.gen_range(1..4);
            let tau = rng.gen_range(0.1..1.0);
            let mut inputs = vec![rand_tensor(&mut rng, &[b, d])];
            for _ in 0..stages {
                let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
                inputs.push(rand_tensor(&mut rng, &[b, d, h, w]));
            }
            grad_check(&ParamStore::new(), &inputs, &|g, _, xs| {
                contrastive_on_tape(g, xs[0], &xs[1..], tau, dir)
            })
        }
        "mask_bce" => {
            let (b, h, w) = (rng.gen_range(1..3), rng.gen_range(2..6), rng.gen_range(2..6));
            let target = Tensor::from_fn(&[b, 1, h, w], |_| f64::from(u8::from(rng.gen_bool(0.4))));
            let logits = Tensor::from_fn(&[b, 1, h, w], |_| rng.gen_range(-3.0..3.0));
            grad_check(&ParamStore::new(), &[logits], &|g, _, xs| {
                let p = g.sigmoid(xs[0]);
                g.bce(p, &target)
            })
        }
        "fuse_stage" => {
            let d = rng.gen_range(2..5);
            let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let b = rng.gen_range(1..3);
            let cfg = FusionConfig {
                bias: rng.gen_bool(0.5),
                zero_init_mu: false,
            };
            let mut store = ParamStore::new();
            let fusion = Fusion::new(&cfg, d, 1, &mut store, &mut rng);
            let v = rand_tensor(&mut rng, &[b, d, h, w]);
            let a = rand_tensor(&mut rng, &[b, d]);
            let r = rand_tensor(&mut rng, &[b, d, h, w]);
            grad_check(&store, &[v, a], &|g, p, xs| {
                let z = fusion.forward_stage(g, p, xs[0], xs[1], 0);
                probe(g, z, &r)
            })
        }
        "decode" => {
            let d = rng.gen_range(2..4);
            let stages = rng.gen_range(1..3);
            let size = (8, 8);
            let cfg = DecoderConfig {
                width: rng.gen_range(2..4),
                zero_init_head: false,
            };
            let mut store = ParamStore::new();
            let dec = Decoder::new(&cfg, d, stages, size, &mut store, &mut rng);
            let inputs: Vec<Tensor> = (0..stages)
                .map(|s| rand_tensor(&mut rng, &[1, d, 4 >> s, 4 >> s]))
                .collect();
            let r = rand_tensor(&mut rng, &[1, 1, size.0, size.1]);
            grad_check(&store, &inputs, &|g, p, xs| {
                let m = dec.forward(g, p, xs);
                probe(g, m, &r)
            })
        }
        other => panic!("unknown gradient suite {other}"),
    }
}
