//! Named parameter collections.
//!
//! Every learned tensor lives in a [`ParamStore`] under a stable,
//! config-derived name (`encoder.stage1.pepx2.conv3.weight`, ...). Names are
//! what the checkpoint container, the optimizer state, and the freeze
//! machinery key on, so iteration order is fixed (sorted by name).

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f64>> {
        self.params.remove(name)
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters, optionally restricted to a name
    /// prefix.
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Global L2 norm over a name-prefixed subset. Used in non-finite-loss
    /// diagnostics.
    pub fn l2_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, v)| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over (name, shape, little-endian f64 bytes) of every parameter
    /// under `prefix`, in sorted name order. Bitwise-sensitive: any change to
    /// any scalar changes the digest.
    pub fn digest(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in value.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Merges another store into this one (names must not collide).
    pub fn absorb(&mut self, other: ParamStore) -> Result<()> {
        for (name, value) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::Config(format!("duplicate parameter '{name}'")));
            }
            self.params.insert(name, value);
        }
        Ok(())
    }
}

/// Gradients accumulated against a [`ParamStore`], keyed by the same names.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: BTreeMap<String, ArrayD<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `grad` into the accumulator for `name`.
    pub fn accumulate(&mut self, name: &str, grad: ArrayD<f64>) {
        match self.grads.get_mut(name) {
            Some(acc) => *acc += &grad,
            None => {
                self.grads.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.grads.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            *g *= factor;
        }
    }

    /// Global L2 norm over all accumulated gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Deterministic per-parameter RNG: the stream depends only on the global
/// seed and the parameter name, never on creation order.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let out = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&out);
    ChaCha8Rng::from_seed(key)
}

/// Fan-in-scaled uniform initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_weight(store: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
    let mut rng = param_rng(seed, name);
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    store.insert(name, ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape/data agree"));
}

/// Biases start at zero.
pub fn init_bias(store: &mut ParamStore, name: &str, len: usize) {
    store.insert(name, ArrayD::zeros(vec![len]));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new();
        init_weight(&mut a, "x.weight", &[3, 4], 3, 7);
        init_weight(&mut a, "y.weight", &[2, 2], 2, 7);

        let mut b = ParamStore::new();
        init_weight(&mut b, "y.weight", &[2, 2], 2, 7);
        init_weight(&mut b, "x.weight", &[3, 4], 3, 7);

        assert_eq!(a, b);
    }

    #[test]
    fn digest_is_bitwise_sensitive() {
        let mut store = ParamStore::new();
        init_weight(&mut store, "enc.w", &[4], 4, 1);
        init_weight(&mut store, "cls.w", &[4], 4, 1);
        let before = store.digest("enc.");
        store.get_mut("cls.w").unwrap()[[0]] += 1.0;
        assert_eq!(store.digest("enc."), before, "unrelated prefix must not affect digest");
        store.get_mut("enc.w").unwrap()[[0]] += 1e-300;
        assert_ne!(store.digest("enc."), before);
    }

    #[test]
    fn grad_accumulation_adds() {
        let mut grads = GradStore::new();
        grads.accumulate("w", ArrayD::from_elem(vec![2], 1.5));
        grads.accumulate("w", ArrayD::from_elem(vec![2], 0.5));
        assert_eq!(grads.get("w").unwrap()[[0]], 2.0);
    }
}
