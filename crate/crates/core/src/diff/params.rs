use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DiffError;
use crate::tensor::Tensor;

/// Named trainable tensors.
///
/// Each tensor is initialized from its own RNG stream derived from
/// `(seed, name)`, so registering an extra parameter never shifts the values
/// of the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        if self.params.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Uniform in ±1/√fan_in.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<(), DiffError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = self.stream(name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn init_constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<(), DiffError> {
        self.insert(name, Tensor::filled(shape, value))
    }

    fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
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

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn absorb_prefix(&mut self, other: &ParamStore, prefix: &str) -> Result<(), DiffError> {
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.insert(name, t.clone())?;
        }
        Ok(())
    }
}

/// Gradient per parameter name, shaped like the parameter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamGrads(pub BTreeMap<String, Tensor>);

impl ParamGrads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_initialization() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        a.init_uniform("w", &[3, 4], 3).unwrap();
        b.init_uniform("w", &[3, 4], 3).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn extra_parameters_do_not_shift_existing_ones() {
        let mut a = ParamStore::new(1);
        a.init_uniform("x", &[5], 5).unwrap();
        let mut b = ParamStore::new(1);
        b.init_uniform("head", &[5], 5).unwrap();
        b.init_uniform("x", &[5], 5).unwrap();
        assert_eq!(a.get("x"), b.get("x"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = ParamStore::new(1);
        a.init_constant("b", &[2], 0.0).unwrap();
        assert!(matches!(a.init_constant("b", &[2], 1.0), Err(DiffError::DuplicateParam(_))));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = ParamGrads::default();
        g.0.insert("a".into(), Tensor::vector(vec![3.0, 4.0]));
        let before = g.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
