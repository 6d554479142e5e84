//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output with respect to every node that requires one. Layouts are
//! NCHW for feature maps and row-major `[rows, cols]` for matrices.

use crate::tensor::{bilinear_taps, gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norm clamp used by every cosine similarity on the tape.
pub const COS_EPS: f64 = 1e-8;

/// Probability clamp for binary cross entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Weight mass below which a weighted pool falls back to the unweighted mean.
pub const POOL_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        padding: Padding,
        cols: Vec<f64>,
    },
    Upsample(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    DuplicateSpatial(Var),
    MaxCosSim {
        a: Var,
        v: Var,
        argmax: Vec<usize>,
    },
    InfoNce {
        sims: Var,
        tau: f64,
        transpose: bool,
        probs: Vec<f64>,
    },
    Bce {
        m: Var,
        target: Vec<f64>,
    },
    WeightedPool {
        feat: Var,
        w: Var,
        complement: bool,
        fallback: Vec<bool>,
    },
    CosineMatrix {
        x: Var,
        y: Var,
    },
    OffDiagMean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// How convolutions read outside the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Zeros,
    /// Repeat the nearest edge value.
    Replicate,
}

impl Padding {
    /// Source index for padded coordinate `p`, or `None` for a zero tap.
    fn index(self, p: usize, pad: usize, size: usize) -> Option<usize> {
        let i = p as isize - pad as isize;
        match self {
            Padding::Zeros => (i >= 0 && i < size as isize).then_some(i as usize),
            Padding::Replicate => Some(i.clamp(0, size as isize - 1) as usize),
        }
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    padding: Padding,
    cols: &mut [f64],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let Some(iy) = padding.index(oy * stride + ky, pad, h) else {
                        dst[oy * wo..(oy + 1) * wo].fill(0.0);
                        continue;
                    };
                    let src = &x[ci * h * w + iy * w..];
                    for ox in 0..wo {
                        dst[oy * wo + ox] = match padding.index(ox * stride + kx, pad, w) {
                            Some(ix) => src[ix],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    padding: Padding,
    dx: &mut [f64],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let Some(iy) = padding.index(oy * stride + ky, pad, h) else {
                        continue;
                    };
                    let base = ci * h * w + iy * w;
                    for ox in 0..wo {
                        if let Some(ix) = padding.index(ox * stride + kx, pad, w) {
                            dx[base + ix] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient of `cos(u, w)` (with norms clamped at [`COS_EPS`]) scaled by `g`,
/// accumulated into `du` and `dw`.
fn cos_backward(u: &[f64], w: &[f64], g: f64, du: Option<&mut [f64]>, dw: Option<&mut [f64]>) {
    let nu_raw = norm(u);
    let nw_raw = norm(w);
    let nu = nu_raw.max(COS_EPS);
    let nw = nw_raw.max(COS_EPS);
    let dot: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
    let c = dot / (nu * nw);
    if let Some(du) = du {
        let corr = if nu_raw > COS_EPS { c / (nu * nu) } else { 0.0 };
        for ((d, &wi), &ui) in du.iter_mut().zip(w).zip(u) {
            *d += g * (wi / (nu * nw) - corr * ui);
        }
    }
    if let Some(dw) = dw {
        let corr = if nw_raw > COS_EPS { c / (nw * nw) } else { 0.0 };
        for ((d, &ui), &wi) in dw.iter_mut().zip(u).zip(w) {
            *d += g * (ui / (nu * nw) - corr * wi);
        }
    }
}

fn cosine(u: &[f64], w: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
    dot / (norm(u).max(COS_EPS) * norm(w).max(COS_EPS))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input (parameters, or inputs under gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// 2-d convolution, `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        self.conv2d_padded(x, w, b, stride, pad, Padding::Zeros)
    }

    pub fn conv2d_padded(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        padding: Padding,
    ) -> Var {
        let (n, cin, h, wd) = dims4(self.value(x));
        let (cout, wcin, k, k2) = dims4(self.value(w));
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d expects square kernels");
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let plane = ho * wo;
        let krows = cin * k * k;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; n * krows * plane]
        };
        let mut out = vec![0.0; n * cout * plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                let col: &[f64] = if pointwise {
                    xs
                } else {
                    let c = &mut cols[s * krows * plane..(s + 1) * krows * plane];
                    im2col(xs, cin, h, wd, k, stride, pad, padding, c);
                    c
                };
                let os = &mut out[s * cout * plane..(s + 1) * cout * plane];
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (co, row) in os.chunks_mut(plane).enumerate() {
                        row.fill(bv[co]);
                    }
                    gemm(cout, krows, plane, wv, false, col, false, os, 1.0);
                } else {
                    gemm(cout, krows, plane, wv, false, col, false, os, 0.0);
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(vec![n, cout, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                padding,
                cols,
            },
            ng,
        )
    }

    /// Bilinear resize of the two trailing axes (half-pixel centers).
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let out = crate::tensor::resize_bilinear(self.value(x), out_h, out_w);
        let ng = self.ng(x);
        self.push(out, Op::Upsample(x), ng)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let hw = h * w;
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|i| xv[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(x), ng)
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` -> `x wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shape mismatch");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        let beta = if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
            1.0
        } else {
            0.0
        };
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            beta,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![n, dout], out), Op::Linear { x, w, b }, ng)
    }

    /// Batched matmul of 3-d tensors: `op(a) · op(b)` per batch element, where
    /// `op` transposes the last two axes when the flag is set.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let asz = self.value(a).shape().to_vec();
        let bsz = self.value(b).shape().to_vec();
        assert!(asz.len() == 3 && bsz.len() == 3 && asz[0] == bsz[0], "bmm expects [N, r, c]");
        let n = asz[0];
        let (m, k) = if ta { (asz[2], asz[1]) } else { (asz[1], asz[2]) };
        let (kb, nn) = if tb { (bsz[2], bsz[1]) } else { (bsz[1], bsz[2]) };
        assert_eq!(k, kb, "bmm inner dimension mismatch");
        let mut out = vec![0.0; n * m * nn];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for s in 0..n {
            gemm(
                m,
                k,
                nn,
                &av[s * m * k..(s + 1) * m * k],
                ta,
                &bv[s * k * nn..(s + 1) * k * nn],
                tb,
                &mut out[s * m * nn..(s + 1) * m * nn],
                0.0,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![n, m, nn], out), Op::Bmm { a, b, ta, tb }, ng)
    }

    /// `[N, D] -> [N, D, h, w]` repeating each vector at every location.
    pub fn duplicate_spatial(&mut self, a: Var, h: usize, w: usize) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        let hw = h * w;
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(n * d * hw);
        for &x in av {
            out.extend(std::iter::repeat(x).take(hw));
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![n, d, h, w], out), Op::DuplicateSpatial(a), ng)
    }

    /// Max-pooled cosine similarity matrix: `out[i, m] = max_p cos(a_i, v_m[:, p])`
    /// for `a: [B, D]`, `v: [B, D, h, w]`.
    pub fn max_cos_sim(&mut self, a: Var, v: Var) -> Var {
        let (nb, d, h, w) = dims4(self.value(v));
        let asz = self.value(a).shape().to_vec();
        assert!(asz.len() == 2 && asz[1] == d, "max_cos_sim channel mismatch");
        let na = asz[0];
        let p = h * w;
        let vv = self.value(v).data();
        let av = self.value(a).data();
        // Unit location vectors, [B, P, D].
        let mut units = vec![0.0; nb * p * d];
        for m in 0..nb {
            for loc in 0..p {
                let mut nrm = 0.0;
                for c in 0..d {
                    nrm += vv[(m * d + c) * p + loc].powi(2);
                }
                let nrm = nrm.sqrt().max(COS_EPS);
                for c in 0..d {
                    units[(m * p + loc) * d + c] = vv[(m * d + c) * p + loc] / nrm;
                }
            }
        }
        let mut out = vec![0.0; na * nb];
        let mut argmax = vec![0; na * nb];
        for i in 0..na {
            let ai = &av[i * d..(i + 1) * d];
            let an = norm(ai).max(COS_EPS);
            for m in 0..nb {
                let mut best = f64::NEG_INFINITY;
                let mut best_loc = 0;
                for loc in 0..p {
                    let u = &units[(m * p + loc) * d..(m * p + loc + 1) * d];
                    let c: f64 = ai.iter().zip(u).map(|(x, y)| x * y).sum::<f64>() / an;
                    if c > best {
                        best = c;
                        best_loc = loc;
                    }
                }
                out[i * nb + m] = best;
                argmax[i * nb + m] = best_loc;
            }
        }
        let ng = self.ng(a) || self.ng(v);
        self.push(
            Tensor::new(vec![na, nb], out),
            Op::MaxCosSim { a, v, argmax },
            ng,
        )
    }

    /// Multiple-instance InfoNCE on a square similarity matrix. With
    /// `transpose == false` each row is a softmax family (`-1/B Σ_i log softmax_m(S_im/τ)[i]`);
    /// with `transpose == true` each column is.
    pub fn info_nce(&mut self, sims: Var, tau: f64, transpose: bool) -> Var {
        let s = self.value(sims);
        let b = s.shape()[0];
        assert_eq!(s.shape(), &[b, b], "info_nce expects a square matrix");
        let at = |i: usize, m: usize| {
            if transpose {
                s.data()[m * b + i]
            } else {
                s.data()[i * b + m]
            }
        };
        let mut probs = vec![0.0; b * b];
        let mut loss = 0.0;
        for i in 0..b {
            let mx = (0..b).map(|m| at(i, m) / tau).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..b).map(|m| (at(i, m) / tau - mx).exp()).sum();
            let lse = mx + z.ln();
            loss -= at(i, i) / tau - lse;
            for m in 0..b {
                probs[i * b + m] = (at(i, m) / tau - lse).exp();
            }
        }
        loss /= b as f64;
        let ng = self.ng(sims);
        self.push(
            Tensor::scalar(loss),
            Op::InfoNce {
                sims,
                tau,
                transpose,
                probs,
            },
            ng,
        )
    }

    /// Mean binary cross entropy of probabilities `m` (clamped to `[ε, 1-ε]`)
    /// against a constant target of the same size.
    pub fn bce(&mut self, m: Var, target: &Tensor) -> Var {
        let mv = self.value(m);
        assert_eq!(mv.len(), target.len(), "bce size mismatch");
        let n = mv.len() as f64;
        let loss: f64 = mv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let ng = self.ng(m);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                m,
                target: target.data().to_vec(),
            },
            ng,
        )
    }

    /// Weighted spatial pooling `[N, C, h, w] x [N, 1, h, w] -> [N, C]`.
    /// With `complement` the weights are `1 - w`. Samples whose weight mass is
    /// below [`POOL_EPS`] fall back to the unweighted mean.
    pub fn weighted_pool(&mut self, feat: Var, w: Var, complement: bool) -> Var {
        let (n, c, h, wd) = dims4(self.value(feat));
        let p = h * wd;
        assert_eq!(self.value(w).shape(), &[n, 1, h, wd], "weighted_pool weight shape");
        let fv = self.value(feat).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * c];
        let mut fallback = vec![false; n];
        for s in 0..n {
            let ws: Vec<f64> = wv[s * p..(s + 1) * p]
                .iter()
                .map(|&x| if complement { 1.0 - x } else { x })
                .collect();
            let mass: f64 = ws.iter().sum();
            fallback[s] = mass < POOL_EPS;
            for ch in 0..c {
                let f = &fv[(s * c + ch) * p..(s * c + ch + 1) * p];
                out[s * c + ch] = if fallback[s] {
                    f.iter().sum::<f64>() / p as f64
                } else {
                    f.iter().zip(&ws).map(|(a, b)| a * b).sum::<f64>() / mass
                };
            }
        }
        let ng = self.ng(feat) || self.ng(w);
        self.push(
            Tensor::new(vec![n, c], out),
            Op::WeightedPool {
                feat,
                w,
                complement,
                fallback,
            },
            ng,
        )
    }

    /// Pairwise cosine similarities of rows: `out[i, j] = cos(x_i, y_j)`.
    pub fn cosine_matrix(&mut self, x: Var, y: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ys = self.value(y).shape().to_vec();
        assert!(xs.len() == 2 && ys.len() == 2 && xs[1] == ys[1], "cosine_matrix shape");
        let d = xs[1];
        let xv = self.value(x).data();
        let yv = self.value(y).data();
        let mut out = vec![0.0; xs[0] * ys[0]];
        for i in 0..xs[0] {
            for j in 0..ys[0] {
                out[i * ys[0] + j] = cosine(&xv[i * d..(i + 1) * d], &yv[j * d..(j + 1) * d]);
            }
        }
        let ng = self.ng(x) || self.ng(y);
        self.push(
            Tensor::new(vec![xs[0], ys[0]], out),
            Op::CosineMatrix { x, y },
            ng,
        )
    }

    /// Mean of the off-diagonal entries of a square matrix.
    pub fn off_diag_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.shape()[0];
        assert!(t.shape() == [n, n] && n >= 2, "off_diag_mean expects a square matrix, n >= 2");
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += t.data()[i * n + j];
                }
            }
        }
        let out = Tensor::scalar(s / (n * (n - 1)) as f64);
        let ng = self.ng(a);
        self.push(out, Op::OffDiagMean(a), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap());
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |t| t.add_assign(g));
                self.acc(grads, *b, |t| t.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |t| t.add_assign(g));
                self.acc(grads, *b, |t| {
                    for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |t| {
                    for ((x, gy), bb) in t.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += gy * bb;
                    }
                });
                self.acc(grads, *b, |t| {
                    for ((x, gy), aa) in t.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gy * aa;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |t| {
                for (x, gy) in t.data_mut().iter_mut().zip(g.data()) {
                    *x += gy * c;
                }
            }),
            Op::AddScalar(a) => self.acc(grads, *a, |t| t.add_assign(g)),
            Op::Sum(a) => {
                let gy = g.item();
                self.acc(grads, *a, |t| t.data_mut().iter_mut().for_each(|x| *x += gy));
            }
            Op::Mean(a) => {
                let gy = g.item() / self.value(*a).len() as f64;
                self.acc(grads, *a, |t| t.data_mut().iter_mut().for_each(|x| *x += gy));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |t| {
                    for ((x, gy), v) in t.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if *v > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.acc(grads, *a, |t| {
                    for ((x, gy), s) in t.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *x += gy * s * (1.0 - s);
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |t| {
                for (x, gy) in t.data_mut().iter_mut().zip(g.data()) {
                    *x += gy;
                }
            }),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                padding,
                cols,
            } => self.conv2d_backward(*x, *w, *b, *stride, *pad, *padding, cols, g, grads),
            Op::Upsample(x) => {
                let xs = self.value(*x).shape().to_vec();
                let nd = xs.len();
                let (h, w) = (xs[nd - 2], xs[nd - 1]);
                let gs = g.shape();
                let (oh, ow) = (gs[nd - 2], gs[nd - 1]);
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let planes = g.len() / (oh * ow);
                self.acc(grads, *x, |t| {
                    let dx = t.data_mut();
                    for p in 0..planes {
                        let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                        let dp = &mut dx[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                                let gy = gp[oy * ow + ox];
                                dp[y0 * w + x0] += gy * (1.0 - wy) * (1.0 - wx);
                                dp[y0 * w + x1] += gy * (1.0 - wy) * wx;
                                dp[y1 * w + x0] += gy * wy * (1.0 - wx);
                                dp[y1 * w + x1] += gy * wy * wx;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = dims4(self.value(*x));
                let hw = h * w;
                self.acc(grads, *x, |t| {
                    for (i, chunk) in t.data_mut().chunks_mut(hw).enumerate() {
                        let gy = g.data()[i] / hw as f64;
                        chunk.iter_mut().for_each(|v| *v += gy);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = self.value(*w).shape()[0];
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                self.acc(grads, *x, |t| {
                    gemm(n, dout, din, g.data(), false, wv, false, t.data_mut(), 1.0)
                });
                self.acc(grads, *w, |t| {
                    gemm(dout, n, din, g.data(), true, xv, false, t.data_mut(), 1.0)
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |t| {
                        for row in g.data().chunks(dout) {
                            for (x, gy) in t.data_mut().iter_mut().zip(row) {
                                *x += gy;
                            }
                        }
                    });
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let asz = self.value(*a).shape();
                let n = asz[0];
                let (m, k) = if ta { (asz[2], asz[1]) } else { (asz[1], asz[2]) };
                let nn = g.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |t| {
                    let da = t.data_mut();
                    for s in 0..n {
                        let gs = &g.data()[s * m * nn..(s + 1) * m * nn];
                        let bs = &bv[s * k * nn..(s + 1) * k * nn];
                        let ds = &mut da[s * m * k..(s + 1) * m * k];
                        if ta {
                            gemm(k, nn, m, bs, tb, gs, true, ds, 1.0);
                        } else {
                            gemm(m, nn, k, gs, false, bs, !tb, ds, 1.0);
                        }
                    }
                });
                self.acc(grads, *b, |t| {
                    let db = t.data_mut();
                    for s in 0..n {
                        let gs = &g.data()[s * m * nn..(s + 1) * m * nn];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let ds = &mut db[s * k * nn..(s + 1) * k * nn];
                        if tb {
                            gemm(nn, m, k, gs, true, as_, ta, ds, 1.0);
                        } else {
                            gemm(k, m, nn, as_, !ta, gs, false, ds, 1.0);
                        }
                    }
                });
            }
            Op::DuplicateSpatial(a) => {
                let gs = g.shape();
                let hw = gs[2] * gs[3];
                self.acc(grads, *a, |t| {
                    for (x, chunk) in t.data_mut().iter_mut().zip(g.data().chunks(hw)) {
                        *x += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::MaxCosSim { a, v, argmax } => {
                let (nb, d, h, w) = dims4(self.value(*v));
                let p = h * w;
                let na = self.value(*a).shape()[0];
                let av = self.value(*a).data();
                let vv = self.value(*v).data();
                let mut da = vec![0.0; na * d];
                let mut dv = vec![0.0; nb * d * p];
                let mut u = vec![0.0; d];
                let mut du = vec![0.0; d];
                for i in 0..na {
                    for m in 0..nb {
                        let gy = g.data()[i * nb + m];
                        if gy == 0.0 {
                            continue;
                        }
                        let loc = argmax[i * nb + m];
                        for c in 0..d {
                            u[c] = vv[(m * d + c) * p + loc];
                        }
                        du.iter_mut().for_each(|x| *x = 0.0);
                        cos_backward(
                            &av[i * d..(i + 1) * d],
                            &u,
                            gy,
                            Some(&mut da[i * d..(i + 1) * d]),
                            Some(&mut du),
                        );
                        for c in 0..d {
                            dv[(m * d + c) * p + loc] += du[c];
                        }
                    }
                }
                self.acc(grads, *a, |t| t.add_assign(&Tensor::new(vec![na, d], da)));
                self.acc(grads, *v, |t| {
                    for (x, y) in t.data_mut().iter_mut().zip(&dv) {
                        *x += y;
                    }
                });
            }
            Op::InfoNce {
                sims,
                tau,
                transpose,
                probs,
            } => {
                let b = self.value(*sims).shape()[0];
                let scale = g.item() / (b as f64 * tau);
                self.acc(grads, *sims, |t| {
                    let ds = t.data_mut();
                    for i in 0..b {
                        for m in 0..b {
                            let delta = if i == m { 1.0 } else { 0.0 };
                            let val = scale * (probs[i * b + m] - delta);
                            if *transpose {
                                ds[m * b + i] += val;
                            } else {
                                ds[i * b + m] += val;
                            }
                        }
                    }
                });
            }
            Op::Bce { m, target } => {
                let mv = self.value(*m);
                let n = mv.len() as f64;
                let gy = g.item();
                self.acc(grads, *m, |t| {
                    for ((x, &p), &y) in t.data_mut().iter_mut().zip(mv.data()).zip(target) {
                        if p > BCE_EPS && p < 1.0 - BCE_EPS {
                            *x += gy * (-y / p + (1.0 - y) / (1.0 - p)) / n;
                        }
                    }
                });
            }
            Op::WeightedPool {
                feat,
                w,
                complement,
                fallback,
            } => {
                let (n, c, h, wd) = dims4(self.value(*feat));
                let p = h * wd;
                let fv = self.value(*feat).data();
                let wv = self.value(*w).data();
                let out = node.value.data();
                let sign = if *complement { -1.0 } else { 1.0 };
                let weights = |s: usize| -> Vec<f64> {
                    wv[s * p..(s + 1) * p]
                        .iter()
                        .map(|&x| if *complement { 1.0 - x } else { x })
                        .collect()
                };
                self.acc(grads, *feat, |t| {
                    let df = t.data_mut();
                    for s in 0..n {
                        let ws = weights(s);
                        let mass: f64 = ws.iter().sum();
                        for ch in 0..c {
                            let gy = g.data()[s * c + ch];
                            let dst = &mut df[(s * c + ch) * p..(s * c + ch + 1) * p];
                            if fallback[s] {
                                dst.iter_mut().for_each(|x| *x += gy / p as f64);
                            } else {
                                for (x, wi) in dst.iter_mut().zip(&ws) {
                                    *x += gy * wi / mass;
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *w, |t| {
                    let dw = t.data_mut();
                    for s in 0..n {
                        if fallback[s] {
                            continue;
                        }
                        let mass: f64 = weights(s).iter().sum();
                        for ch in 0..c {
                            let gy = g.data()[s * c + ch];
                            let o = out[s * c + ch];
                            let f = &fv[(s * c + ch) * p..(s * c + ch + 1) * p];
                            for (x, fi) in dw[s * p..(s + 1) * p].iter_mut().zip(f) {
                                *x += sign * gy * (fi - o) / mass;
                            }
                        }
                    }
                });
            }
            Op::CosineMatrix { x, y } => {
                let xs = self.value(*x).shape();
                let (nx, d) = (xs[0], xs[1]);
                let ny = self.value(*y).shape()[0];
                let xv = self.value(*x).data();
                let yv = self.value(*y).data();
                let mut dx = vec![0.0; nx * d];
                let mut dy = vec![0.0; ny * d];
                for i in 0..nx {
                    for j in 0..ny {
                        let gy = g.data()[i * ny + j];
                        if gy == 0.0 {
                            continue;
                        }
                        cos_backward(
                            &xv[i * d..(i + 1) * d],
                            &yv[j * d..(j + 1) * d],
                            gy,
                            Some(&mut dx[i * d..(i + 1) * d]),
                            Some(&mut dy[j * d..(j + 1) * d]),
                        );
                    }
                }
                self.acc(grads, *x, |t| t.add_assign(&Tensor::new(vec![nx, d], dx)));
                self.acc(grads, *y, |t| t.add_assign(&Tensor::new(vec![ny, d], dy)));
            }
            Op::OffDiagMean(a) => {
                let n = self.value(*a).shape()[0];
                let gy = g.item() / (n * (n - 1)) as f64;
                self.acc(grads, *a, |t| {
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                t.data_mut()[i * n + j] += gy;
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        padding: Padding,
        cols: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (n, cin, h, wd) = dims4(self.value(x));
        let (cout, _, k, _) = dims4(self.value(w));
        let (_, _, ho, wo) = dims4(g);
        let plane = ho * wo;
        let krows = cin * k * k;
        let pointwise = cols.is_empty();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        self.acc(grads, w, |t| {
            for s in 0..n {
                let col = if pointwise {
                    &xv[s * cin * h * wd..(s + 1) * cin * h * wd]
                } else {
                    &cols[s * krows * plane..(s + 1) * krows * plane]
                };
                let gs = &g.data()[s * cout * plane..(s + 1) * cout * plane];
                gemm(cout, plane, krows, gs, false, col, true, t.data_mut(), 1.0);
            }
        });
        if let Some(b) = b {
            self.acc(grads, b, |t| {
                for s in 0..n {
                    for co in 0..cout {
                        let row = &g.data()[(s * cout + co) * plane..(s * cout + co + 1) * plane];
                        t.data_mut()[co] += row.iter().sum::<f64>();
                    }
                }
            });
        }
        self.acc(grads, x, |t| {
            let dx = t.data_mut();
            let mut dcols = vec![0.0; krows * plane];
            for s in 0..n {
                let gs = &g.data()[s * cout * plane..(s + 1) * cout * plane];
                let dxs = &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd];
                if pointwise {
                    gemm(krows, cout, plane, wv, true, gs, false, dxs, 1.0);
                } else {
                    gemm(krows, cout, plane, wv, true, gs, false, &mut dcols, 0.0);
                    col2im(&dcols, cin, h, wd, k, stride, pad, padding, dxs);
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks the tape gradient of `f` at `x` against central differences.
    fn check(x: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = f(&mut g, xv);
        let grads = g.backward(y);
        let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let h = 1e-6;
        let mut numeric = vec![0.0; x.len()];
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let v = g.leaf(xp);
                let out = f(&mut g, v);
                g.value(out).item()
            };
            numeric[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = norm(analytic.data()).max(norm(&numeric)).max(1e-8);
        assert!(diff / scale < 1e-5, "relative gradient error {}", diff / scale);
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let probe = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 6]);
        check(x.clone(), |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.conv2d(x, w, Some(b), 2, 1);
            let p = g.constant(probe.clone());
            let y = g.mul(y, p);
            g.sum(y)
        });
        check(w.clone(), |g, w| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, w, None, 2, 1);
            let p = g.constant(probe.clone());
            let y = g.mul(y, p);
            g.sum(y)
        });
        check(x.clone(), |g, x| {
            let w = g.constant(w.clone());
            let y = g.conv2d_padded(x, w, None, 2, 1, Padding::Replicate);
            let p = g.constant(probe.clone());
            let y = g.mul(y, p);
            g.sum(y)
        });
    }

    #[test]
    fn replicate_padding_sees_edge_values() {
        // A constant input stays constant under a summing kernel.
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 5], 2.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d_padded(x, w, None, 1, 1, Padding::Replicate);
        assert!(g.value(y).data().iter().all(|&v| v == 18.0));
        let z = g.conv2d(x, w, None, 1, 1);
        assert_eq!(g.value(z).data()[0], 8.0);
    }

    #[test]
    fn pointwise_conv_and_bmm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_tensor(&mut rng, &[4, 3, 1, 1]);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 3]);
        check(x.clone(), |g, x| {
            let w = g.constant(w.clone());
            let y = g.conv2d(x, w, None, 1, 0);
            let y = g.mul(y, y);
            g.sum(y)
        });
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_tensor(&mut rng, &[2, 3, 4]);
            let bshape = match (ta, tb) {
                (false, false) => [2, 4, 5],
                (false, true) => [2, 5, 4],
                (true, false) => [2, 3, 5],
                (true, true) => [2, 5, 3],
            };
            let b = rand_tensor(&mut rng, &bshape);
            check(a.clone(), |g, a| {
                let b = g.constant(b.clone());
                let y = g.bmm(a, b, ta, tb);
                let y = g.mul(y, y);
                g.sum(y)
            });
            check(b.clone(), |g, b| {
                let a = g.constant(a.clone());
                let y = g.bmm(a, b, ta, tb);
                let y = g.mul(y, y);
                g.sum(y)
            });
        }
    }

    #[test]
    fn upsample_linear_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe = rand_tensor(&mut rng, &[1, 2, 7, 5]);
        check(rand_tensor(&mut rng, &[1, 2, 3, 2]), |g, x| {
            let y = g.upsample(x, 7, 5);
            let p = g.constant(probe.clone());
            let y = g.mul(y, p);
            g.sum(y)
        });
        let w = rand_tensor(&mut rng, &[3, 2]);
        check(rand_tensor(&mut rng, &[2, 2, 3, 3]), |g, x| {
            let y = g.global_avg_pool(x);
            let w = g.constant(w.clone());
            let y = g.linear(y, w, None);
            let y = g.sigmoid(y);
            g.sum(y)
        });
    }

    #[test]
    fn weighted_pool_and_cosine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feat = rand_tensor(&mut rng, &[3, 4, 2, 2]);
        let w = Tensor::from_fn(&[3, 1, 2, 2], |_| rng.gen_range(0.1..0.9));
        for complement in [false, true] {
            check(w.clone(), |g, w| {
                let f = g.constant(feat.clone());
                let fg = g.weighted_pool(f, w, complement);
                let bg = g.weighted_pool(f, w, !complement);
                let c = g.cosine_matrix(fg, bg);
                g.off_diag_mean(c)
            });
            check(feat.clone(), |g, f| {
                let w = g.constant(w.clone());
                let fg = g.weighted_pool(f, w, complement);
                let c = g.cosine_matrix(fg, fg);
                let c = g.mul(c, c);
                g.sum(c)
            });
        }
    }

    #[test]
    fn info_nce_uniform_closed_form() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::full(&[4, 4], 0.3));
        let l = g.info_nce(s, 0.07, false);
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }
}
