//! Parameter storage, initialization and the SGD optimizer.
//!
//! All trainable tensors live in a [`ParamStore`] keyed by name. Models hold
//! names, not tensors, so shared parameters (e.g. a shared classifier head)
//! are a matter of two models referencing the same key.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ImedError, Result};
use crate::tape::{Tape, Var};

/// Named parameter tensors with deterministic iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        assert!(
            self.tensors.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| ImedError::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count over a name subset.
    pub fn count_params(&self, names: &[String]) -> usize {
        names.iter().map(|n| self.get(n).len()).sum()
    }

    /// Inserts every named tensor as a tape leaf; returns name -> Var.
    pub fn leaves(&self, tape: &mut Tape, names: &[String]) -> IndexMap<String, Var> {
        names
            .iter()
            .map(|n| (n.clone(), tape.leaf(self.get(n).clone())))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Kaiming-style init for a ReLU MLP layer: N(0, 2/fan_in).
pub fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Affine layer parameter names: `(weight, bias)` under a prefix.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Affine {
    /// Registers weight `d_in x d_out` and bias `1 x d_out` under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = format!("{prefix}.w");
        let bias = format!("{prefix}.b");
        store.insert(&weight, init_weight(rng, d_in, d_out, d_in));
        store.insert(&bias, Array2::zeros((1, d_out)));
        Affine {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &IndexMap<String, Var>, x: Var) -> Var {
        let w = vars[&self.weight];
        let b = vars[&self.bias];
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// A ReLU MLP: affine layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Affine>,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dims: &[usize],
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Affine::init(store, rng, &format!("{prefix}.fc{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &IndexMap<String, Var>, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, vars, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers.iter().flat_map(|l| l.param_names()).collect()
    }
}

/// Gradients keyed by parameter name, as produced by one backward pass.
pub type GradMap = IndexMap<String, Array2<f64>>;

/// SGD with momentum (`v = mu*v + g; p -= lr*v`).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    buffers: IndexMap<String, Array2<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            buffers: IndexMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap, lr: f64) {
        for (name, grad) in grads {
            let buf = self
                .buffers
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.raw_dim()));
            *buf *= self.momentum;
            *buf += grad;
            let p = store.get_mut(name);
            p.scaled_add(-lr, buf);
        }
    }
}

/// Euclidean norm over a set of gradient matrices.
pub fn grad_l2_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

pub fn grads_all_finite(grads: &GradMap) -> bool {
    grads.values().all(|g| g.iter().all(|v| v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn seeded_init_is_deterministic_and_seed_sensitive() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let mut s3 = ParamStore::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let mut r3 = ChaCha8Rng::seed_from_u64(5);
        Mlp::init(&mut s1, &mut r1, "m", &[3, 8, 2]);
        Mlp::init(&mut s2, &mut r2, "m", &[3, 8, 2]);
        Mlp::init(&mut s3, &mut r3, "m", &[3, 8, 2]);
        assert_eq!(s1.get("m.fc0.w"), s2.get("m.fc0.w"));
        assert_ne!(s1.get("m.fc0.w"), s3.get("m.fc0.w"));
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut store = ParamStore::new();
        store.insert("p", array![[1.0]]);
        let mut opt = Sgd::new(0.9);
        let mut grads = GradMap::new();
        grads.insert("p".into(), array![[1.0]]);
        opt.step(&mut store, &grads, 0.1);
        assert!((store.get("p")[(0, 0)] - 0.9).abs() < 1e-12);
        opt.step(&mut store, &grads, 0.1);
        // buffer = 0.9*1 + 1 = 1.9; p = 0.9 - 0.19 = 0.71
        assert!((store.get("p")[(0, 0)] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn mlp_forward_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::init(&mut store, &mut rng, "m", &[4, 8, 3]);
        let mut tape = Tape::new();
        let vars = store.leaves(&mut tape, &mlp.param_names());
        let x = tape.leaf(Array2::zeros((5, 4)));
        let y = mlp.forward(&mut tape, &vars, x);
        assert_eq!(tape.value(y).dim(), (5, 3));
    }
}
