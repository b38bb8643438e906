//! Named parameter storage, gradient accumulation and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// All learnable matrices of a model, ordered by name so that iteration,
/// serialization and optimizer updates are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.values.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.values.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<f64>> {
        self.values.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.values.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    /// Number of scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.values
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Array2<f64>>,
}

impl GradStore {
    pub fn accumulate(&mut self, name: &str, grad: &Array2<f64>, scale: f64) {
        match self.grads.get_mut(name) {
            Some(g) => g.scaled_add(scale, grad),
            None => {
                self.grads.insert(name.to_string(), grad * scale);
            }
        }
    }

    pub fn merge(&mut self, other: &GradStore, scale: f64) {
        for (k, g) in &other.grads {
            self.accumulate(k, g, scale);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for g in self.grads.values_mut() {
                g.mapv_inplace(|v| v * k);
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Moment buffers are created lazily per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Array2<f64>>,
    pub second: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Gaussian-initialized matrix.
pub fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    if std == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Glorot/Xavier normal initialization.
pub fn xavier_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal_matrix(rows, cols, std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_update_opposes_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("w", array![[0.0]]);
        let mut adam = Adam::new(AdamConfig::default());
        for sign in [1.0, -1.0] {
            let before = store.get("w").unwrap()[[0, 0]];
            let mut grads = GradStore::default();
            grads.accumulate("w", &array![[sign * 3.0]], 1.0);
            let mut fresh = Adam::new(AdamConfig::default());
            fresh.step(&mut store, &grads, 0.1);
            let after = store.get("w").unwrap()[[0, 0]];
            assert!((after - before) * sign < 0.0);
            // first Adam step moves by ~lr regardless of gradient scale
            assert!(((after - before).abs() - 0.1).abs() < 1e-6);
        }
        let mut grads = GradStore::default();
        grads.accumulate("w", &array![[0.5]], 1.0);
        adam.step(&mut store, &grads, 0.01);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = GradStore::default();
        grads.accumulate("a", &array![[3.0, 4.0]], 1.0);
        let before = grads.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn count_sums_all_entries() {
        let mut s = ParamStore::new();
        s.insert("a.x", Array2::zeros((3, 4)));
        s.insert("b", Array2::zeros((1, 5)));
        assert_eq!(s.count(), 17);
        assert_eq!(s.count_prefix("a."), 12);
    }
}
