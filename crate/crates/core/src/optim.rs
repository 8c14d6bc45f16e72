//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Parameters addressed by stable names, iterated in insertion order. The
/// names double as the tensor names inside checkpoint archives, so they must
/// stay stable across versions.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.values[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.values[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// `(name, value)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Create one leaf per parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut map = HashMap::new();
        for (name, value) in self.iter() {
            map.insert(name.to_string(), tape.leaf(value.clone()));
        }
        BoundParams { map }
    }
}

/// Tape leaves for one forward pass, looked up by parameter name.
pub struct BoundParams {
    map: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self.map.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Adam with bias correction. Moments are kept per parameter name; parameters
/// that receive no gradient in a step do not move and their moments do not
/// decay, which is what ablation freezing relies on.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: HashMap::new() }
    }

    /// Apply one update from `(name, gradient)` pairs.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[2], vec![5.0, -3.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = store.get("x").scale(2.0); // d/dx of x^2
            opt.step(&mut store, &[("x".to_string(), g)]);
        }
        let x = store.get("x");
        assert!(x.data().iter().all(|v| v.abs() < 1e-3), "did not converge: {:?}", x.data());
    }

    #[test]
    fn params_without_grads_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        store.insert("b", Tensor::scalar(2.0));
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &[("a".to_string(), Tensor::scalar(1.0))]);
        assert_eq!(store.get("b").data()[0], 2.0);
        assert_ne!(store.get("a").data()[0], 1.0);
    }

    #[test]
    fn store_iterates_in_insertion_order() {
        let mut store = ParamStore::new();
        store.insert("z", Tensor::scalar(0.0));
        store.insert("a", Tensor::scalar(0.0));
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["z", "a"]);
    }
}
