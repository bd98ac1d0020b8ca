use serde::{Deserialize, Serialize};

use super::tape::{log_sum_exp, HALF_LN_2PI};
use crate::error::{domain, Result};

/// Diagonal Gaussian mixture over a `d`-dimensional vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stddevs: Vec<Vec<f64>>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stddevs: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self { weights, means, stddevs };
        p.validate()?;
        Ok(p)
    }

    /// Builds parameters from raw head outputs: softmax over `logits`, `exp` of `log_sigma`.
    pub fn from_raw(logits: &[f64], mu: &[f64], log_sigma: &[f64]) -> Result<Self> {
        let k = logits.len();
        if k == 0 || mu.len() % k != 0 || mu.len() != log_sigma.len() {
            return domain(format!("raw mixture shapes: {k} logits, {} means, {} log-stddevs", mu.len(), log_sigma.len()));
        }
        let d = mu.len() / k;
        let lse = log_sum_exp(logits);
        let weights = logits.iter().map(|l| (l - lse).exp()).collect();
        let means = mu.chunks(d).map(|c| c.to_vec()).collect();
        let stddevs = log_sigma.chunks(d).map(|c| c.iter().map(|s| s.exp()).collect()).collect();
        Self::new(weights, means, stddevs)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return domain("mixture needs at least one component");
        }
        if self.means.len() != k || self.stddevs.len() != k {
            return domain("mixture component counts disagree");
        }
        let d = self.means[0].len();
        if self.means.iter().chain(&self.stddevs).any(|v| v.len() != d) {
            return domain("mixture components have inconsistent dimension");
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return domain("mixture weights must be non-negative");
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return domain(format!("mixture weights sum to {total}, not 1"));
        }
        if self.stddevs.iter().flatten().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return domain("mixture stddevs must be positive and finite");
        }
        if self.means.iter().flatten().any(|m| !m.is_finite()) {
            return domain("mixture means must be finite");
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `sum_k pi_k mu_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }

    /// Shannon entropy of the component weights (nats).
    pub fn weight_entropy(&self) -> f64 {
        -self.weights.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>()
    }

    pub fn max_stddev(&self) -> f64 {
        self.stddevs.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// `-ln sum_k pi_k prod_j N(target_j; mu_kj, sigma_kj)`, evaluated with log-sum-exp.
pub fn mdn_nll(params: &MixtureParams, target: &[f64]) -> Result<f64> {
    params.validate()?;
    if target.len() != params.dim() {
        return domain(format!("target has length {}, mixture dimension is {}", target.len(), params.dim()));
    }
    let comps: Vec<f64> = params
        .weights
        .iter()
        .zip(params.means.iter().zip(&params.stddevs))
        .map(|(w, (mu, sd))| {
            w.ln()
                + target
                    .iter()
                    .zip(mu.iter().zip(sd))
                    .map(|(t, (m, s))| {
                        let z = (t - m) / s;
                        -0.5 * z * z - s.ln() - HALF_LN_2PI
                    })
                    .sum::<f64>()
        })
        .collect();
    Ok(-log_sum_exp(&comps))
}
