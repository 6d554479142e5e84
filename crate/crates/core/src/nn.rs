//! Parameter storage, layers and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Padding, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    /// Drops every parameter registered after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.names.truncate(len);
        self.tensors.truncate(len);
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t.clone())).collect())
    }

    /// Puts every parameter on the tape as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Moves the parameter gradients out of `grads`, in store order.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.0.iter().map(|&v| grads.take(v)).collect()
    }
}

/// He-uniform initializer: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            he_uniform(rng, &[cout, cin, kernel, kernel], cin * kernel * kernel),
        );
        let bias = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
            padding: Padding::Zeros,
        }
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d_padded(
            x,
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            self.stride,
            self.pad,
            self.padding,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), he_uniform(rng, &[dout, din], din));
        let bias = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[dout])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

pub struct Adam {
    pub config: AdamConfig,
    state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            state: AdamState {
                step: 0,
                first: zeros.clone(),
                second: zeros,
            },
        }
    }

    pub fn from_state(config: AdamConfig, state: AdamState) -> Self {
        Self { config, state }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// One bias-corrected update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len());
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = &mut self.state.first[i];
            let v = &mut self.state.second[i];
            let w = store.tensors[i].data_mut();
            for j in 0..w.len() {
                let gj = grad.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                w[j] -= c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.register("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = p.var(id);
            let sq = g.mul(x, x);
            let loss = g.sum(sq);
            let mut grads = g.backward(loss);
            let grads = p.gradients(&mut grads);
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            Conv2d::new(&mut store, &mut rng, "c", 3, 4, 3, 1, true);
            Linear::new(&mut store, &mut rng, "l", 4, 2, false);
            store
        };
        let (a, b) = (build(), build());
        assert_eq!(a.shapes(), b.shapes());
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }
}
