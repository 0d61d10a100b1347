use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Named parameter collection. Iteration follows insertion order, which keeps
/// optimizer updates, checkpoints, and gradient maps deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Param>,
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    tensor: Tensor,
    trainable: bool,
}

/// Gradients keyed by parameter name, same order as the store they came from.
pub type Gradients = IndexMap<String, Tensor>;

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(
            name.to_string(),
            Param { tensor, trainable },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name:?} has shape {:?}, assigned {:?}",
                p.tensor.shape(),
                tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|p| p.trainable).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    /// Mark every parameter non-trainable (e.g. a frozen prior model).
    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries
            .iter()
            .map(|(k, p)| (k.as_str(), &p.tensor, p.trainable))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Names starting with `prefix`, in insertion order.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Zero-filled gradient map covering every entry.
    pub fn zero_gradients(&self) -> Gradients {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.tensor.shape().to_vec())))
            .collect()
    }
}

/// Uniform init in +-sqrt(6 / (fan_in + fan_out)).
pub fn uniform_init<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("uniform_init produced invalid tensor")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn insertion_order_preserved() {
        let mut s = ParameterStore::new();
        s.insert("b", Tensor::scalar(1.0).unwrap(), true).unwrap();
        s.insert("a", Tensor::scalar(2.0).unwrap(), true).unwrap();
        assert_eq!(s.names(), vec!["b".to_string(), "a".to_string()]);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(0.0).unwrap(), true).unwrap();
        assert!(s.insert("w", Tensor::scalar(0.0).unwrap(), true).is_err());
    }

    #[test]
    fn uniform_init_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = uniform_init(&mut rng, vec![8, 4], 4, 8);
        let bound = (6.0 / 12.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
    }
}
