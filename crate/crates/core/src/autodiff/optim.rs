use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment buffers for every tensor of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        if !(config.learning_rate >= 0.0) || !(config.epsilon > 0.0) {
            return Err(Error::Parameter(format!(
                "invalid optimizer settings {config:?}"
            )));
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Ok(OptimizerState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the
/// gradients.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::Internal(format!(
            "optimizer tracks {} tensors, store has {}",
            state.first.len(),
            store.len()
        )));
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let tensor = store.get_mut(id);
        if state.first[i].len() != tensor.len() {
            return Err(Error::Internal(format!(
                "optimizer state for parameter {i} has the wrong size"
            )));
        }
        let (values, grad) = tensor.values_and_grad_mut();
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for j in 0..values.len() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            values[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            grad[j] = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![0.5, -1.5])).unwrap();
        let mut st = OptimizerState::new(&store, AdamConfig::default()).unwrap();
        adam_step(&mut store, &mut st).unwrap();
        assert_eq!(store.get(id).values(), &[0.5, -1.5]);
    }

    #[test]
    fn single_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::vector(vec![1.0])).unwrap();
        store.get_mut(id).grad_mut()[0] = 1.0;
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::new(&store, cfg).unwrap();
        adam_step(&mut store, &mut st).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction.
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.get(id).values()[0] - expected).abs() < 1e-15);
        assert!((store.get(id).values()[0] - 0.9).abs() < 1e-8);
        assert_eq!(store.get(id).grad(), &[0.0]);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::vector(vec![0.3, 0.7])).unwrap();
        let b = store.insert("b", Tensor::vector(vec![0.3, 0.7])).unwrap();
        let mut st = OptimizerState::new(&store, AdamConfig::default()).unwrap();
        for k in 0..5 {
            for id in [a, b] {
                store.get_mut(id).grad_mut().copy_from_slice(&[0.1 * k as f64, -0.2]);
            }
            adam_step(&mut store, &mut st).unwrap();
        }
        assert_eq!(store.get(a).values(), store.get(b).values());
    }

    #[test]
    fn mismatched_state_is_internal_error() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0])).unwrap();
        let mut st = OptimizerState::new(&store, AdamConfig::default()).unwrap();
        store.insert("b", Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(adam_step(&mut store, &mut st), Err(Error::Internal(_))));
    }
}
