//! Python bindings: cohorts, encoders, state models, the simulator
//! environment, a trained Q-network, the metric helpers and the pipeline
//! stages.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use patientsim::agent::QNetwork;
use patientsim::data::{self, ActionCode, CohortSchema, StateVector};
use patientsim::env::{self as simenv, Environment, RewardSpec, WorldModelEnv};
use patientsim::eval::{self, NtmNormalization};
use patientsim::learner::{self, Checkpoint, MixtureParams, OptimizerConfig, TrainSchedule};
use patientsim::pipeline::{self, RunConfig, Stage};
use patientsim::state_model::{self as sm, HistoryWindow, Prediction, Variant};
use patientsim::synth::{generate_synthetic_cohort, SyntheticDynamicsSpec};
use patientsim::vae::{self, AutoencoderConfig};
use patientsim::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::State(_) | Error::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for patientsim::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn action(code: usize) -> PyResult<ActionCode> {
    ActionCode::new(code).py()
}

fn variant(label: &str) -> PyResult<Variant> {
    Variant::parse(label).py()
}

/// An episodic cohort with per-feature normalization.
#[pyclass(module = "patientsim_py")]
struct Cohort {
    inner: data::Cohort,
}

#[pymethods]
impl Cohort {
    /// Loads an episode CSV with the default column layout.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: data::load_cohort(path, &CohortSchema::default()).py()? })
    }

    /// Synthetic sepsis-like cohort (`preset` is "sepsis" or "separable").
    #[staticmethod]
    #[pyo3(signature = (n_episodes, seed=0, preset="sepsis"))]
    fn synthetic(n_episodes: usize, seed: u64, preset: &str) -> PyResult<Self> {
        let spec = match preset {
            "sepsis" => SyntheticDynamicsSpec::sepsis_default(seed),
            "separable" => SyntheticDynamicsSpec::separable(seed),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(Self { inner: generate_synthetic_cohort(&spec, n_episodes).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::export_cohort(&self.inner, path).py()
    }

    /// Episode-level split; both halves use the first half's statistics.
    #[pyo3(signature = (fraction=0.8, seed=0))]
    fn split(&self, fraction: f64, seed: u64) -> PyResult<(Cohort, Cohort)> {
        let (a, b) = data::split_cohort(&self.inner, fraction, seed).py()?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn death_rate(&self) -> f64 {
        self.inner.death_rate()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names().to_vec()
    }

    /// Normalized states of one episode.
    fn states(&self, episode: usize) -> PyResult<Vec<Vec<f64>>> {
        let ep = self.episode(episode)?;
        Ok(ep.states.iter().map(|s| s.to_vec()).collect())
    }

    fn raw_states(&self, episode: usize) -> PyResult<Vec<Vec<f64>>> {
        let ep = self.episode(episode)?;
        Ok(ep.raw_states.iter().map(|s| s.to_vec()).collect())
    }

    fn actions(&self, episode: usize) -> PyResult<Vec<usize>> {
        Ok(self.episode(episode)?.actions.iter().map(|a| a.code()).collect())
    }

    /// 1 for death, 0 for release.
    fn outcome(&self, episode: usize) -> PyResult<u8> {
        Ok(self.episode(episode)?.outcome.label() as u8)
    }

    fn all_states(&self) -> Vec<Vec<f64>> {
        self.inner.episodes.iter().flat_map(|e| e.states.iter().map(|s| s.to_vec())).collect()
    }
}

impl Cohort {
    fn episode(&self, i: usize) -> PyResult<&data::PatientEpisode> {
        self.inner.episodes.get(i).ok_or_else(|| PyValueError::new_err(format!("episode {i} out of range ({} episodes)", self.inner.len())))
    }
}

fn schedule(epochs: usize, batch_size: usize, seed: u64) -> TrainSchedule {
    TrainSchedule { max_epochs: epochs, batch_size, seed, ..TrainSchedule::default() }
}

/// VAE or deterministic autoencoder over normalized 46-feature states.
#[pyclass(module = "patientsim_py")]
struct Autoencoder {
    inner: vae::Autoencoder,
}

#[pymethods]
impl Autoencoder {
    #[new]
    #[pyo3(signature = (kind="vae", seed=0, kl_weight=0.0))]
    fn new(kind: &str, seed: u64, kl_weight: f64) -> PyResult<Self> {
        let base = match kind {
            "vae" => AutoencoderConfig::vae(),
            "ae" => AutoencoderConfig::ae(),
            other => return Err(PyValueError::new_err(format!("unknown autoencoder kind {other:?}"))),
        };
        let cfg = AutoencoderConfig { kl_weight, ..base.with_seed(seed) };
        Ok(Self { inner: vae::Autoencoder::new(cfg).py()? })
    }

    /// Trains on `train`'s states with early stopping on `val`; returns the
    /// per-epoch validation MSE.
    #[pyo3(signature = (train, val, epochs=20, batch_size=32, learning_rate=1e-3, seed=0))]
    fn fit(&mut self, train: &Cohort, val: &Cohort, epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> PyResult<Vec<f64>> {
        let h = learner::fit(
            &mut self.inner,
            &train.all_states(),
            &val.all_states(),
            &schedule(epochs, batch_size, seed),
            OptimizerConfig::adam(learning_rate),
        )
        .py()?;
        Ok(h.epochs.iter().map(|e| e.val_metric).collect())
    }

    fn encode_mean(&self, state: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.encode_mean(&state).py()
    }

    fn decode(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.decode_raw(&z).py()
    }

    fn reconstruction_mse(&self, states: Vec<Vec<f64>>) -> PyResult<f64> {
        self.inner.reconstruction_mse(&states).py()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().and_then(|c| c.save(path)).py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(path).and_then(|c| vae::Autoencoder::from_checkpoint(&c)).py()? })
    }
}

/// Next-state model over raw states (no encoder) for the RNN and MDN+RNN variants.
#[pyclass(module = "patientsim_py")]
struct StateModel {
    inner: sm::StateModel,
}

#[pymethods]
impl StateModel {
    #[new]
    #[pyo3(signature = (variant="MDN+RNN", seed=0))]
    fn new(variant: &str, seed: u64) -> PyResult<Self> {
        let cfg = sm::StateModelConfig { init_seed: seed, ..sm::StateModelConfig::new(self::variant(variant)?) };
        Ok(Self { inner: sm::StateModel::new(cfg).py()? })
    }

    /// Trains on a cohort (raw-state variants only); returns per-epoch validation metrics.
    #[pyo3(signature = (train, val, epochs=10, batch_size=32, learning_rate=1e-3, seed=0))]
    fn fit(&mut self, train: &Cohort, val: &Cohort, epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> PyResult<Vec<f64>> {
        let (model, h) = sm::train_state_model(
            self.inner.config().clone(),
            &train.inner,
            &val.inner,
            None,
            &schedule(epochs, batch_size, seed),
            OptimizerConfig::adam(learning_rate),
        )
        .py()?;
        self.inner = model;
        Ok(h.epochs.iter().map(|e| e.val_metric).collect())
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant().label()
    }

    /// Mean next-state prediction from a history of (state, action) pairs, oldest first.
    fn predict_mean(&self, states: Vec<Vec<f64>>, actions: Vec<usize>) -> PyResult<Vec<f64>> {
        Ok(self.inner.predict(&self.window(states, actions)?).py()?.mean())
    }

    /// Mixture parameters `(weights, means, stddevs)`; mixture variants only.
    fn predict_mixture(&self, states: Vec<Vec<f64>>, actions: Vec<usize>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        match self.inner.predict(&self.window(states, actions)?).py()? {
            Prediction::Mixture(m) => Ok((m.weights, m.means, m.stddevs)),
            Prediction::Point(_) => Err(PyValueError::new_err("point-prediction variant has no mixture")),
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().and_then(|c| c.save(path)).py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(path).and_then(|c| sm::StateModel::from_checkpoint(&c)).py()? })
    }
}

impl StateModel {
    fn window(&self, states: Vec<Vec<f64>>, actions: Vec<usize>) -> PyResult<HistoryWindow> {
        if states.len() != actions.len() || states.is_empty() {
            return Err(PyValueError::new_err("need one action per state and at least one state"));
        }
        let mut w = self.inner.empty_window();
        for (s, a) in states.into_iter().zip(actions) {
            w.push(s, action(a)?).py()?;
        }
        Ok(w)
    }
}

/// Gym-style simulator built from a pipeline run's checkpoints.
#[pyclass(module = "patientsim_py")]
struct Simulator {
    inner: WorldModelEnv,
}

#[pymethods]
impl Simulator {
    /// Opens the simulator for `variant` from a pipeline output directory.
    /// The run's `config.json` is used when present.
    #[staticmethod]
    #[pyo3(signature = (out_dir, variant="VAE+MDN+RNN", seed=0))]
    fn from_run(out_dir: PathBuf, variant: &str, seed: u64) -> PyResult<Self> {
        let cfg_path = out_dir.join("config.json");
        let cfg = if cfg_path.is_file() { RunConfig::load(&cfg_path).py()? } else { RunConfig::default() };
        Ok(Self { inner: pipeline::open_simulator(&cfg, &out_dir, self::variant(variant)?, seed).py()? })
    }

    fn reset(&mut self) -> PyResult<Vec<f64>> {
        self.inner.reset().py()
    }

    /// Starts from a given normalized state.
    fn reset_to(&mut self, state: Vec<f64>) -> PyResult<Vec<f64>> {
        let s = StateVector::new(state).py()?;
        self.inner.reset_to(&s).py()
    }

    /// Returns `(observation, reward, done, info)`.
    fn step<'py>(&mut self, py: Python<'py>, action: usize) -> PyResult<(Vec<f64>, f64, bool, Bound<'py, PyDict>)> {
        let r = self.inner.step(self::action(action)?).py()?;
        let info = PyDict::new(py);
        info.set_item("p_terminate", r.info.p_terminate)?;
        info.set_item("p_death", r.info.p_death)?;
        info.set_item("death", r.info.outcome.map(|o| o.label() == 1.0))?;
        info.set_item("mixture_entropy", r.info.mixture_entropy)?;
        info.set_item("hit_max_steps", r.info.hit_max_steps)?;
        Ok((r.observation, r.reward, r.done, info))
    }

    fn reseed(&mut self, seed: u64) {
        self.inner.reseed(seed);
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.inner.step_count()
    }

    #[getter]
    fn observation_dim(&self) -> usize {
        self.inner.observation_dim()
    }
}

/// A trained Q-network.
#[pyclass(module = "patientsim_py")]
struct QPolicy {
    inner: QNetwork,
}

#[pymethods]
impl QPolicy {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(path).and_then(|c| QNetwork::from_checkpoint(&c)).py()? })
    }

    fn q_values(&self, obs: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.q_values(&obs).py()
    }

    fn greedy(&self, obs: Vec<f64>) -> PyResult<usize> {
        Ok(self.inner.greedy(&obs).py()?.code())
    }
}

/// Joint action code `5 * iv_bin + vaso_bin`.
#[pyfunction]
fn action_code(iv_bin: usize, vaso_bin: usize) -> PyResult<usize> {
    Ok(ActionCode::from_bins(iv_bin, vaso_bin).py()?.code())
}

/// `(iv_bin, vaso_bin)` of an action code.
#[pyfunction]
fn decode_action(code: usize) -> PyResult<(usize, usize)> {
    data::decode_action(code).py()
}

/// Mixture negative log-likelihood of `target`.
#[pyfunction]
fn mdn_nll(weights: Vec<f64>, means: Vec<Vec<f64>>, stddevs: Vec<Vec<f64>>, target: Vec<f64>) -> PyResult<f64> {
    let p = MixtureParams::new(weights, means, stddevs).py()?;
    learner::mdn_nll(&p, &target).py()
}

/// KL(N(mu, sigma^2) || N(0, I)).
#[pyfunction]
fn gaussian_kl(mu: Vec<f64>, sigma: Vec<f64>) -> PyResult<f64> {
    if mu.len() != sigma.len() {
        return Err(PyValueError::new_err("mu and sigma differ in length"));
    }
    Ok(vae::gaussian_kl(&mu, &sigma))
}

/// Draws a next state from a mixture at temperature `tau`.
#[pyfunction]
#[pyo3(signature = (weights, means, stddevs, tau=1.0, seed=0))]
fn sample_mixture(weights: Vec<f64>, means: Vec<Vec<f64>>, stddevs: Vec<Vec<f64>>, tau: f64, seed: u64) -> PyResult<Vec<f64>> {
    let p = MixtureParams::new(weights, means, stddevs).py()?;
    sm::sample_next(&p, tau, &mut ChaCha8Rng::seed_from_u64(seed)).py()
}

/// Shaped reward between two de-normalized states.
#[pyfunction]
fn shaped_reward(prev: Vec<f64>, next: Vec<f64>) -> PyResult<f64> {
    simenv::shaped_reward(&prev, &next, &RewardSpec::sofa_lactate_shaped()).py()
}

/// Per-feature NTM of `real` and `sim` (`[episode][t][feature]`); returns
/// `(ntm_real, ntm_sim, mean_gap)`.
#[pyfunction]
#[pyo3(signature = (real, sim, rms=false))]
fn normalized_trajectory_mean(real: Vec<Vec<Vec<f64>>>, sim: Vec<Vec<Vec<f64>>>, rms: bool) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let d = real.iter().chain(&sim).flatten().map(|r| r.len()).next().unwrap_or(0);
    let (rm, smx) = eval::aligned_matrices(&real, &sim, d).py()?;
    let mode = if rms { NtmNormalization::RootMeanSquare } else { NtmNormalization::SumOfSquares };
    let r = eval::normalized_trajectory_mean(&rm, &smx, mode).py()?;
    Ok((r.features.iter().map(|f| f.real).collect(), r.features.iter().map(|f| f.sim).collect(), r.mean_gap))
}

/// Runs one pipeline stage (or "all") into `out_dir`. `config` is a JSON
/// string in the run-config format. Returns the stage's metrics.
#[pyfunction]
#[pyo3(signature = (stage, out_dir, config=None, seed=None))]
fn run_stage(
    py: Python<'_>,
    stage: &str,
    out_dir: PathBuf,
    config: Option<&str>,
    seed: Option<u64>,
) -> PyResult<std::collections::BTreeMap<String, f64>> {
    let mut cfg = match config {
        Some(text) => RunConfig::from_json(text).py()?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().py()?;
    let stages: Vec<Stage> = if stage == "all" {
        Stage::PIPELINE.to_vec()
    } else {
        vec![Stage::parse(stage).ok_or_else(|| PyValueError::new_err(format!("unknown stage {stage:?}")))?]
    };
    py.detach(|| {
        let mut metrics = std::collections::BTreeMap::new();
        for st in stages {
            metrics.extend(pipeline::run_stage(st, &cfg, &out_dir)?.metrics);
        }
        Ok(metrics)
    })
    .py()
}

/// Default run configuration as a JSON string.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&RunConfig::default()).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
pub fn patientsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("N_FEATURES", data::N_FEATURES)?;
    m.add("N_ACTIONS", data::N_ACTIONS)?;
    m.add("VARIANTS", Variant::ALL.iter().map(|v| v.label()).collect::<Vec<_>>())?;
    m.add_class::<Cohort>()?;
    m.add_class::<Autoencoder>()?;
    m.add_class::<StateModel>()?;
    m.add_class::<Simulator>()?;
    m.add_class::<QPolicy>()?;
    m.add_function(wrap_pyfunction!(action_code, m)?)?;
    m.add_function(wrap_pyfunction!(decode_action, m)?)?;
    m.add_function(wrap_pyfunction!(mdn_nll, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(shaped_reward, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_trajectory_mean, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
