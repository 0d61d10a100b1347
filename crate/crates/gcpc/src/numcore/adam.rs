use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numcore::params::{Gradients, ParameterStore};

/// Adam hyperparameters. The defaults follow the usual convention
/// (beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8, lr = 1e-3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus a shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    /// One Adam update with bias correction. Only trainable parameters move;
    /// moments are created lazily and always match their parameter's shape.
    pub fn apply(&mut self, params: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        let names: Vec<String> = params
            .iter()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(n, _, _)| n.to_string())
            .collect();
        for name in names {
            let grad = grads
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("missing gradient for {name:?}")))?;
            let tensor = params.get_mut(&name)?;
            if grad.shape() != tensor.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for {name:?} has shape {:?}, parameter {:?}",
                    grad.shape(),
                    tensor.shape()
                )));
            }
            let n = tensor.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let p = tensor.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;

    fn single_param(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::vector(vec![v]).unwrap(), true).unwrap();
        s
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = single_param(3.5);
        let grads = params.zero_gradients();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.apply(&mut params, &grads).unwrap();
        assert_eq!(params.get("p").unwrap().data(), &[3.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // p = 1, g = 1, lr = 0.1 -> p' ~= 0.9
        let mut params = single_param(1.0);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::vector(vec![1.0]).unwrap());
        let mut adam = AdamState::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        adam.apply(&mut params, &grads).unwrap();
        let p = params.get("p").unwrap().data()[0];
        assert!((p - 0.9).abs() < 1e-7, "got {p}");
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut params = ParameterStore::new();
        params.insert("a", Tensor::vector(vec![0.7]).unwrap(), true).unwrap();
        params.insert("b", Tensor::vector(vec![0.7]).unwrap(), true).unwrap();
        let mut grads = Gradients::new();
        grads.insert("a".into(), Tensor::vector(vec![-0.3]).unwrap());
        grads.insert("b".into(), Tensor::vector(vec![-0.3]).unwrap());
        let mut adam = AdamState::new(AdamConfig::default());
        adam.apply(&mut params, &grads).unwrap();
        assert_eq!(
            params.get("a").unwrap().data()[0].to_bits(),
            params.get("b").unwrap().data()[0].to_bits()
        );
    }

    #[test]
    fn frozen_parameter_never_moves() {
        let mut params = ParameterStore::new();
        params.insert("w", Tensor::vector(vec![1.0]).unwrap(), false).unwrap();
        let mut grads = Gradients::new();
        grads.insert("w".into(), Tensor::vector(vec![10.0]).unwrap());
        let mut adam = AdamState::new(AdamConfig::default());
        adam.apply(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = single_param(0.0);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(matches!(
            adam.apply(&mut params, &grads),
            Err(Error::Dimension(_))
        ));
    }
}
