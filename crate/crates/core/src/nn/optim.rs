use serde::{Deserialize, Serialize};

use super::network::{Gradients, WeightSet};
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "lowercase")]
pub enum Algorithm {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(flatten)]
    pub algorithm: Algorithm,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            algorithm: Algorithm::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-7,
            },
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            algorithm: Algorithm::Sgd,
        }
    }
}

/// Moment estimates and step counter for one weight set.
#[derive(Debug, Clone)]
pub struct OptimizerState<T = f32> {
    pub config: OptimizerConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, weights: &WeightSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = weights.tensors().map(|t| vec![T::zero(); t.len()]).collect();
        let second = match config.algorithm {
            Algorithm::Adam { .. } => zeros.clone(),
            Algorithm::Sgd => Vec::new(),
        };
        let first = match config.algorithm {
            Algorithm::Adam { .. } => zeros,
            Algorithm::Sgd => Vec::new(),
        };
        OptimizerState {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Non-finite gradients abort before anything is touched.
    pub fn step(&mut self, weights: &mut WeightSet<T>, grads: &Gradients<T>) -> Result<()> {
        let shapes_match = weights.tensors().count() == grads.tensors().count()
            && weights.tensors().zip(grads.tensors()).all(|(w, g)| w.shape() == g.shape());
        if !shapes_match {
            return Err(Error::Dimension("gradients do not match weight shapes".into()));
        }
        for (ti, g) in grads.tensors().enumerate() {
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at tensor {ti}, element {pos} (step {})",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let lr = self.config.learning_rate;
        match self.config.algorithm {
            Algorithm::Sgd => {
                let lr = T::from_f64(lr);
                for (w, g) in weights.tensors_mut().zip(grads.tensors()) {
                    for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
                        *wv = *wv - lr * gv;
                    }
                }
            }
            Algorithm::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
                let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
                let (lr, eps) = (T::from_f64(lr), T::from_f64(epsilon));
                for (((w, g), m), v) in weights
                    .tensors_mut()
                    .zip(grads.tensors())
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    for (((wv, &gv), mv), vv) in w
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mv = b1 * *mv + one_b1 * gv;
                        *vv = b2 * *vv + one_b2 * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *wv = *wv - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        weights.bump_generation();
        Ok(())
    }
}
