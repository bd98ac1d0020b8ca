//! Synthetic patient cohorts with known latent dynamics.
//!
//! A latent severity process `h` evolves as
//! `h' = tanh(drift * h + action_effects[a] + noise)` and is observed through a
//! linear emission with additive noise. Termination follows a hazard that grows
//! with the step number; the outcome is drawn from a logistic model on the
//! final latent state. The first latent coordinate is the "severity" axis: the
//! behaviour policy doses harder when it is high, and the default presets tie
//! SOFA (feature 0) and lactate (feature 1) to it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{default_feature_names, ActionCode, Cohort, Outcome, PatientEpisode, StateVector, N_ACTIONS, N_DOSE_BINS, N_FEATURES};
use crate::error::{domain, Result};

pub const SOFA_INDEX: usize = 0;
pub const LACTATE_INDEX: usize = 1;

/// How the synthetic "physician" picks dose bins from the latent severity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    pub base_bin: f64,
    pub severity_gain: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDynamicsSpec {
    pub latent_dim: usize,
    pub drift_matrix: Vec<Vec<f64>>,
    pub action_effects: Vec<Vec<f64>>,
    pub emission_matrix: Vec<Vec<f64>>,
    pub emission_offset: Vec<f64>,
    pub noise_scale: f64,
    pub emission_noise: f64,
    pub init_scale: f64,
    pub hazard_coeffs: Vec<f64>,
    pub hazard_bias: f64,
    pub hazard_step_slope: f64,
    pub outcome_coeffs: Vec<f64>,
    pub outcome_bias: f64,
    pub max_length: usize,
    pub behavior: BehaviorPolicy,
    pub seed: u64,
}

impl SyntheticDynamicsSpec {
    /// Default sepsis-like preset: high-intensity treatment pushes severity up
    /// and severity drives mortality, so sustained low-intensity care
    /// maximizes survival.
    pub fn sepsis_default(seed: u64) -> Self {
        let latent_dim = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_d15ea5e);
        let mut normal = |scale: f64| -> f64 { scale * rng.sample::<f64, _>(StandardNormal) };

        let mut drift = vec![vec![0.0; latent_dim]; latent_dim];
        for (i, row) in drift.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 0.8 } else { normal(0.04) };
            }
        }
        // Severity evolves on its own, decoupled from the nuisance coordinates.
        for j in 1..latent_dim {
            drift[0][j] = 0.0;
        }

        let action_effects: Vec<Vec<f64>> = ActionCode::all()
            .map(|a| {
                let (iv, vaso) = a.bins();
                (0..latent_dim)
                    .map(|k| match k {
                        0 => 0.1 * (a.intensity() - 2.0),
                        1 => 0.15 * (iv as f64 - 2.0),
                        2 => 0.15 * (vaso as f64 - 2.0),
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();

        let mut emission = vec![vec![0.0; latent_dim]; N_FEATURES];
        for row in emission.iter_mut() {
            for v in row.iter_mut() {
                *v = normal(1.0 / (latent_dim as f64).sqrt());
            }
        }
        emission[SOFA_INDEX] = one_hot_row(latent_dim, 0, 3.0);
        emission[LACTATE_INDEX] = one_hot_row(latent_dim, 0, 1.5);
        let mut emission_offset = vec![0.0; N_FEATURES];
        emission_offset[SOFA_INDEX] = 7.0;
        emission_offset[LACTATE_INDEX] = 2.5;
        for v in emission_offset.iter_mut().skip(2) {
            *v = normal(1.0);
        }

        let mut hazard_coeffs = vec![0.0; latent_dim];
        hazard_coeffs[0] = 0.5;
        let mut outcome_coeffs = vec![0.0; latent_dim];
        outcome_coeffs[0] = 4.0;

        Self {
            latent_dim,
            drift_matrix: drift,
            action_effects,
            emission_matrix: emission,
            emission_offset,
            noise_scale: 0.1,
            emission_noise: 0.05,
            init_scale: 0.6,
            hazard_coeffs,
            hazard_bias: -4.0,
            hazard_step_slope: 0.15,
            outcome_coeffs,
            outcome_bias: -0.5,
            max_length: 40,
            behavior: BehaviorPolicy { base_bin: 1.0, severity_gain: 1.5, noise: 0.8 },
            seed,
        }
    }

    /// Preset whose termination and outcome are near-deterministic functions
    /// of the observed state and step number.
    pub fn separable(seed: u64) -> Self {
        let mut spec = Self::sepsis_default(seed);
        spec.outcome_coeffs[0] = 40.0;
        spec.outcome_bias = 0.0;
        spec.hazard_coeffs[0] = 0.0;
        spec.hazard_bias = -30.0;
        spec.hazard_step_slope = 3.0;
        spec
    }

    /// Noise-free variant: transitions and emissions are deterministic given the action.
    pub fn noiseless(seed: u64) -> Self {
        let mut spec = Self::sepsis_default(seed);
        spec.noise_scale = 0.0;
        spec.emission_noise = 0.0;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.latent_dim;
        if l == 0 {
            return domain("latent_dim must be positive");
        }
        let square = self.drift_matrix.len() == l && self.drift_matrix.iter().all(|r| r.len() == l);
        if !square {
            return domain("drift_matrix must be latent_dim x latent_dim");
        }
        if self.action_effects.len() != N_ACTIONS || self.action_effects.iter().any(|r| r.len() != l) {
            return domain("action_effects must be 25 x latent_dim");
        }
        if self.emission_matrix.len() != N_FEATURES || self.emission_matrix.iter().any(|r| r.len() != l) {
            return domain("emission_matrix must be 46 x latent_dim");
        }
        if self.emission_offset.len() != N_FEATURES {
            return domain("emission_offset must have 46 entries");
        }
        if self.hazard_coeffs.len() != l || self.outcome_coeffs.len() != l {
            return domain("hazard/outcome coefficients must have latent_dim entries");
        }
        if !(self.noise_scale >= 0.0) || !(self.emission_noise >= 0.0) || !(self.init_scale >= 0.0) {
            return domain("noise scales must be non-negative");
        }
        if self.max_length == 0 {
            return domain("max_length must be at least 1");
        }
        let radius = spectral_radius_bound(&self.drift_matrix);
        if !(radius < 1.0) {
            return domain(format!("drift spectral radius {radius:.4} is not below 1"));
        }
        Ok(())
    }
}

fn one_hot_row(n: usize, k: usize, value: f64) -> Vec<f64> {
    let mut r = vec![0.0; n];
    r[k] = value;
    r
}

/// Upper estimate of the spectral radius from Gelfand's formula,
/// `||A^(2^k)||_F^(1/2^k)` with k = 10.
pub fn spectral_radius_bound(a: &[Vec<f64>]) -> f64 {
    const SQUARINGS: u32 = 10;
    let n = a.len();
    let frobenius = |m: &[f64]| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut m: Vec<f64> = a.iter().flatten().copied().collect();
    // Invariant: A^(2^i) = exp(log_scale) * m.
    let mut log_scale = 0.0f64;
    for _ in 0..SQUARINGS {
        let norm = frobenius(&m);
        if norm == 0.0 {
            return 0.0;
        }
        m.iter_mut().for_each(|v| *v /= norm);
        log_scale = 2.0 * (log_scale + norm.ln());
        let mut sq = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = m[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    sq[i * n + j] += aik * m[k * n + j];
                }
            }
        }
        m = sq;
    }
    let norm = frobenius(&m);
    if norm == 0.0 {
        return 0.0;
    }
    ((log_scale + norm.ln()) / 2f64.powi(SQUARINGS as i32)).exp()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ground-truth dynamics of a validated spec.
#[derive(Clone, Debug)]
pub struct SyntheticDynamics {
    spec: SyntheticDynamicsSpec,
}

impl SyntheticDynamics {
    pub fn new(spec: SyntheticDynamicsSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SyntheticDynamicsSpec {
        &self.spec
    }

    pub fn initial_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.spec.latent_dim).map(|_| (self.spec.init_scale * rng.sample::<f64, _>(StandardNormal)).tanh()).collect()
    }

    pub fn transition<R: Rng + ?Sized>(&self, h: &[f64], action: ActionCode, rng: &mut R) -> Vec<f64> {
        let effect = &self.spec.action_effects[action.code()];
        self.spec
            .drift_matrix
            .iter()
            .zip(effect)
            .map(|(row, e)| {
                let noise = self.spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
                (dot(row, h) + e + noise).tanh()
            })
            .collect()
    }

    pub fn emit<R: Rng + ?Sized>(&self, h: &[f64], rng: &mut R) -> Vec<f64> {
        self.spec
            .emission_matrix
            .iter()
            .zip(&self.spec.emission_offset)
            .map(|(row, off)| off + dot(row, h) + self.spec.emission_noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn hazard(&self, h: &[f64], step: usize) -> f64 {
        sigmoid(dot(&self.spec.hazard_coeffs, h) + self.spec.hazard_bias + self.spec.hazard_step_slope * step as f64)
    }

    pub fn death_probability(&self, h: &[f64]) -> f64 {
        sigmoid(dot(&self.spec.outcome_coeffs, h) + self.spec.outcome_bias)
    }

    pub fn behavior_action<R: Rng + ?Sized>(&self, h: &[f64], rng: &mut R) -> ActionCode {
        let b = &self.spec.behavior;
        let mut bin = || -> usize {
            let x = b.base_bin + b.severity_gain * h[0] + b.noise * rng.sample::<f64, _>(StandardNormal);
            x.round().clamp(0.0, (N_DOSE_BINS - 1) as f64) as usize
        };
        let iv = bin();
        let vaso = bin();
        ActionCode::from_bins(iv, vaso).expect("bins clamped to range")
    }

    /// Simulates one stay under the behaviour policy. Returns raw emitted
    /// states, actions, and the outcome.
    pub fn simulate_episode<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<Vec<f64>>, Vec<ActionCode>, Outcome) {
        let mut h = self.initial_latent(rng);
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for t in 0..self.spec.max_length {
            states.push(self.emit(&h, rng));
            let a = self.behavior_action(&h, rng);
            actions.push(a);
            let terminal = t + 1 == self.spec.max_length || rng.random::<f64>() < self.hazard(&h, t);
            if terminal {
                let death = rng.random::<f64>() < self.death_probability(&h);
                let outcome = if death { Outcome::Death } else { Outcome::Release };
                return (states, actions, outcome);
            }
            h = self.transition(&h, a, rng);
        }
        unreachable!("loop always terminates at max_length")
    }
}

/// Generates `n_episodes` stays; a pure function of `(spec, n_episodes)`.
pub fn generate_synthetic_cohort(spec: &SyntheticDynamicsSpec, n_episodes: usize) -> Result<Cohort> {
    if n_episodes == 0 {
        return domain("n_episodes must be at least 1");
    }
    let dynamics = SyntheticDynamics::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let episodes = (0..n_episodes)
        .map(|i| {
            let (raw, actions, outcome) = dynamics.simulate_episode(&mut rng);
            let raw_states: Vec<StateVector> = raw.into_iter().map(|v| StateVector::new(v).expect("finite synthetic state")).collect();
            PatientEpisode { subject_id: format!("synth-{i:05}"), states: raw_states.clone(), raw_states, actions, outcome }
        })
        .collect();
    Ok(Cohort::from_raw(episodes, default_feature_names()))
}
