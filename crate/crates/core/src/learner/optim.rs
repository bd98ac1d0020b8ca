use serde::{Deserialize, Serialize};

use super::tape::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Rescale the full gradient to this global L2 norm when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, learning_rate, clip_norm: None }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, learning_rate, clip_norm: None }
    }

    pub fn momentum(learning_rate: f64, beta: f64) -> Self {
        Self { kind: OptimizerKind::Momentum { beta }, learning_rate, clip_norm: None }
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }
}

/// Optimizer with per-parameter accumulators shaped like the store's tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::Domain(format!("learning rate {} must be positive", config.learning_rate)));
        }
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let second = match config.kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            _ => Vec::new(),
        };
        let first = match config.kind {
            OptimizerKind::Sgd => Vec::new(),
            _ => zeros,
        };
        Ok(Self { config, first, second, steps: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients currently in `store`. Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let lr = self.config.learning_rate;
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = store.tensors().iter().flat_map(|t| &t.grad).map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        match self.config.kind {
            OptimizerKind::Sgd => {
                for t in store.tensors_mut() {
                    for (v, g) in t.values.iter_mut().zip(&t.grad) {
                        *v -= lr * clip * g;
                    }
                }
            }
            OptimizerKind::Momentum { beta } => {
                for (t, m) in store.tensors_mut().iter_mut().zip(&mut self.first) {
                    for ((v, g), mi) in t.values.iter_mut().zip(&t.grad).zip(m.iter_mut()) {
                        *mi = beta * *mi + clip * g;
                        *v -= lr * *mi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powf(self.steps as f64);
                let bc2 = 1.0 - beta2.powf(self.steps as f64);
                for ((t, m), s) in store.tensors_mut().iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    for (((v, g), mi), si) in t.values.iter_mut().zip(&t.grad).zip(m.iter_mut()).zip(s.iter_mut()) {
                        let g = clip * g;
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *si = beta2 * *si + (1.0 - beta2) * g * g;
                        let mhat = *mi / bc1;
                        let shat = *si / bc2;
                        *v -= lr * mhat / (shat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", vec![2], vec![3.0, -2.0]).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore) {
        // Gradient of 0.5 * |x|^2.
        let t = &mut s.tensors_mut()[0];
        t.grad = t.values.clone();
    }

    #[test]
    fn every_kind_minimizes_a_quadratic() {
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::momentum(0.05, 0.9), OptimizerConfig::adam(0.05)] {
            let mut s = quadratic_store();
            let mut opt = Optimizer::new(cfg, &s).unwrap();
            for _ in 0..2000 {
                set_grad(&mut s);
                opt.step(&mut s);
            }
            assert!(s.tensors()[0].values.iter().all(|v| v.abs() < 1e-3), "{cfg:?}: {:?}", s.tensors()[0].values);
        }
    }

    #[test]
    fn accumulators_match_parameter_shapes() {
        let mut s = quadratic_store();
        s.add("w", vec![3, 4], vec![0.0; 12]).unwrap();
        let opt = Optimizer::new(OptimizerConfig::adam(1e-3), &s).unwrap();
        let lens: Vec<usize> = opt.first.iter().map(|m| m.len()).collect();
        assert_eq!(lens, vec![2, 12]);
        assert_eq!(opt.second.iter().map(|m| m.len()).collect::<Vec<_>>(), lens);
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        let s = quadratic_store();
        assert!(Optimizer::new(OptimizerConfig::sgd(0.0), &s).is_err());
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut s = quadratic_store();
        s.tensors_mut()[0].grad = vec![300.0, 400.0];
        let mut opt = Optimizer::new(OptimizerConfig::sgd(1.0).with_clip_norm(5.0), &s).unwrap();
        opt.step(&mut s);
        assert_eq!(s.tensors()[0].values, vec![0.0, -6.0]);
    }
}
