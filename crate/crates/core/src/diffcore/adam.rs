use serde::{Deserialize, Serialize};

use super::{DiffError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            epsilon: 1e-7,
        }
    }
}

/// Adaptive-moment optimizer with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        assert!(config.learning_rate > 0.0, "learning rate must be positive");
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            config,
            step: 0,
            first: params.tensors().iter().map(zeros).collect(),
            second: params.tensors().iter().map(zeros).collect(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        self.config.learning_rate = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts before any parameter
    /// changes so the caller can decide how to recover.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), DiffError> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
            assert_eq!(g.shape(), p.shape(), "gradient {i} shape");
            if !g.is_finite() {
                return Err(DiffError::NonFiniteGradient(i));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
