//! `reset`/`step` environments: the learned world model, a ground-truth
//! synthetic patient, and two tiny reference problems used to check agents.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ActionCode, NormalizationStats, Outcome, PatientEpisode, StateVector, N_ACTIONS, N_FEATURES};
use crate::error::{domain, Error, Result};
use crate::heads::{BinaryHead, HeadKind};
use crate::learner::Checkpoint;
use crate::state_model::{HistoryWindow, Prediction, StateModel, Variant};
use crate::synth::{SyntheticDynamics, SyntheticDynamicsSpec, LACTATE_INDEX, SOFA_INDEX};
use crate::vae::Autoencoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardFormulation {
    TerminalOnly,
    TerminalMinusIntensity,
    SofaLactateShaped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub formulation: RewardFormulation,
    pub terminal_magnitude: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub sofa_index: usize,
    pub lactate_index: usize,
}

impl RewardSpec {
    fn with(formulation: RewardFormulation, terminal_magnitude: f64) -> Self {
        Self { formulation, terminal_magnitude, c0: -0.025, c1: -0.125, c2: -2.0, sofa_index: SOFA_INDEX, lactate_index: LACTATE_INDEX }
    }

    pub fn terminal_only() -> Self {
        Self::with(RewardFormulation::TerminalOnly, 15.0)
    }

    pub fn terminal_minus_intensity() -> Self {
        Self::with(RewardFormulation::TerminalMinusIntensity, 1000.0)
    }

    pub fn sofa_lactate_shaped() -> Self {
        Self::with(RewardFormulation::SofaLactateShaped, 15.0)
    }

    pub fn for_formulation(f: RewardFormulation) -> Self {
        match f {
            RewardFormulation::TerminalOnly => Self::terminal_only(),
            RewardFormulation::TerminalMinusIntensity => Self::terminal_minus_intensity(),
            RewardFormulation::SofaLactateShaped => Self::sofa_lactate_shaped(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.terminal_magnitude > 0.0) || !self.terminal_magnitude.is_finite() {
            return Err(Error::Config(format!("terminal_magnitude must be positive, got {}", self.terminal_magnitude)));
        }
        if self.sofa_index >= N_FEATURES || self.lactate_index >= N_FEATURES {
            return Err(Error::Config("sofa/lactate index outside the feature range".into()));
        }
        if ![self.c0, self.c1, self.c2].iter().all(|c| c.is_finite()) {
            return Err(Error::Config("shaping constants must be finite".into()));
        }
        Ok(())
    }

    /// Reward added on the terminal step: `+magnitude` on release, `-magnitude` on death.
    pub fn terminal_reward(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::Release => self.terminal_magnitude,
            Outcome::Death => -self.terminal_magnitude,
        }
    }
}

/// `c0 * [sofa unchanged and positive] + c1 * Δsofa + c2 * tanh(Δlactate)` on
/// clinical-scale (de-normalized) values.
pub fn shaped_reward(prev: &[f64], next: &[f64], spec: &RewardSpec) -> Result<f64> {
    let (si, li) = (spec.sofa_index, spec.lactate_index);
    if si >= prev.len() || li >= prev.len() || si >= next.len() || li >= next.len() {
        return Err(Error::Config(format!("sofa/lactate indices ({si}, {li}) outside a state of length {}", prev.len())));
    }
    let (s0, s1) = (prev[si], next[si]);
    let unchanged = if s1 == s0 && s1 > 0.0 { 1.0 } else { 0.0 };
    Ok(spec.c0 * unchanged + spec.c1 * (s1 - s0) + spec.c2 * (next[li] - prev[li]).tanh())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationMode {
    Bernoulli,
    Threshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub variant: Variant,
    pub temperature: f64,
    pub reward: RewardSpec,
    pub max_steps: usize,
    pub termination_mode: TerminationMode,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            temperature: 1.0,
            reward: RewardSpec::terminal_only(),
            max_steps: 50,
            termination_mode: TerminationMode::Bernoulli,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        self.reward.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub p_terminate: f64,
    pub p_death: Option<f64>,
    pub outcome: Option<Outcome>,
    pub mixture_entropy: Option<f64>,
    pub hit_max_steps: bool,
    /// Episode cut by a time limit rather than reaching a terminal state.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn reset(&mut self) -> Result<Vec<f64>>;
    fn step(&mut self, action: ActionCode) -> Result<StepResult>;
    fn reseed(&mut self, seed: u64);
}

/// Frozen models composing the simulator; shareable across environments.
#[derive(Clone, Debug)]
pub struct WorldModel {
    pub state_model: Arc<StateModel>,
    pub termination: Arc<BinaryHead>,
    pub outcome: Arc<BinaryHead>,
    pub encoder: Option<Arc<Autoencoder>>,
    pub stats: NormalizationStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimCheckpoints {
    pub state: PathBuf,
    pub termination: PathBuf,
    pub outcome: PathBuf,
    pub encoder: Option<PathBuf>,
}

impl WorldModel {
    pub fn new(
        state_model: StateModel,
        termination: BinaryHead,
        outcome: BinaryHead,
        encoder: Option<Autoencoder>,
        stats: NormalizationStats,
    ) -> Result<Self> {
        let wm = Self {
            state_model: Arc::new(state_model),
            termination: Arc::new(termination),
            outcome: Arc::new(outcome),
            encoder: encoder.map(Arc::new),
            stats,
        };
        wm.validate()?;
        Ok(wm)
    }

    pub fn load(paths: &SimCheckpoints, stats: NormalizationStats) -> Result<Self> {
        let state = StateModel::from_checkpoint(&Checkpoint::load(&paths.state)?)?;
        let term = BinaryHead::from_checkpoint(&Checkpoint::load(&paths.termination)?)?;
        let out = BinaryHead::from_checkpoint(&Checkpoint::load(&paths.outcome)?)?;
        let enc = paths.encoder.as_ref().map(|p| Autoencoder::from_checkpoint(&Checkpoint::load(p)?)).transpose()?;
        Self::new(state, term, out, enc, stats)
    }

    pub fn variant(&self) -> Variant {
        self.state_model.variant()
    }

    pub fn validate(&self) -> Result<()> {
        let variant = self.variant();
        let d = self.state_model.config().input_dim;
        match (variant.encoder_kind(), &self.encoder) {
            (Some(kind), Some(e)) => {
                if e.kind() != kind || e.latent_dim() != d {
                    return Err(Error::Config(format!("encoder does not match variant {variant}")));
                }
            }
            (None, None) => {
                if d != N_FEATURES {
                    return Err(Error::Config("raw-state variants need a 46-feature state model".into()));
                }
            }
            _ => return Err(Error::Config(format!("encoder presence does not match variant {variant}"))),
        }
        if self.termination.kind() != HeadKind::Termination || self.outcome.kind() != HeadKind::Outcome {
            return Err(Error::Config("termination/outcome checkpoints swapped".into()));
        }
        if self.termination.config().input_dim != d || self.outcome.config().input_dim != d {
            return Err(Error::Config("heads consume a different representation than the state model".into()));
        }
        Ok(())
    }

    /// Internal representation of a normalized observation.
    pub fn to_internal(&self, obs: &[f64]) -> Result<Vec<f64>> {
        match &self.encoder {
            Some(e) => e.encode_mean(obs),
            None => Ok(obs.to_vec()),
        }
    }

    /// Normalized 46-feature observation of an internal state.
    pub fn to_observation(&self, internal: &[f64]) -> Result<Vec<f64>> {
        let obs = match &self.encoder {
            Some(e) => e.decode_raw(internal)?,
            None => internal.to_vec(),
        };
        if obs.len() != N_FEATURES || obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::State("simulator produced an invalid observation".into()));
        }
        Ok(obs)
    }
}

#[derive(Clone, Debug)]
struct EnvState {
    internal: Vec<f64>,
    observation: Vec<f64>,
    step_count: usize,
    history: HistoryWindow,
    done: bool,
}

/// Simulator driven by the learned state model and heads. Observations are
/// normalized 46-feature states.
#[derive(Clone, Debug)]
pub struct WorldModelEnv {
    model: WorldModel,
    config: SimConfig,
    pool: Vec<StateVector>,
    rng: ChaCha8Rng,
    state: Option<EnvState>,
}

impl WorldModelEnv {
    pub fn new(model: WorldModel, config: SimConfig, pool: Vec<StateVector>) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if model.variant() != config.variant {
            return Err(Error::Config(format!("config variant {} does not match state model variant {}", config.variant, model.variant())));
        }
        if pool.is_empty() {
            return Err(Error::Config("initial-state pool is empty".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { model, config, pool, rng, state: None })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn model(&self) -> &WorldModel {
        &self.model
    }

    pub fn step_count(&self) -> usize {
        self.state.as_ref().map(|s| s.step_count).unwrap_or(0)
    }

    pub fn is_done(&self) -> bool {
        self.state.as_ref().map(|s| s.done).unwrap_or(false)
    }

    /// Starts an episode from a given normalized state.
    pub fn reset_to(&mut self, obs: &StateVector) -> Result<Vec<f64>> {
        let internal = self.model.to_internal(obs)?;
        self.state = Some(EnvState {
            internal,
            observation: obs.to_vec(),
            step_count: 0,
            history: self.model.state_model.empty_window(),
            done: false,
        });
        Ok(obs.to_vec())
    }

    fn bernoulli(&mut self, p: f64) -> bool {
        match self.config.termination_mode {
            TerminationMode::Bernoulli => self.rng.random::<f64>() < p,
            TerminationMode::Threshold => p >= 0.5,
        }
    }
}

impl Environment for WorldModelEnv {
    fn observation_dim(&self) -> usize {
        N_FEATURES
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        let i = self.rng.random_range(0..self.pool.len());
        let s = self.pool[i].clone();
        self.reset_to(&s)
    }

    fn step(&mut self, action: ActionCode) -> Result<StepResult> {
        let mut st = self.state.take().ok_or_else(|| Error::State("step called before reset".into()))?;
        if st.done {
            self.state = Some(st);
            return Err(Error::State("step called on a finished episode".into()));
        }
        let k = st.step_count;
        st.history.push(st.internal.clone(), action)?;
        let (next, pred) = self.model.state_model.next_state(&st.history, self.config.temperature, &mut self.rng)?;
        let mixture_entropy = match &pred {
            Prediction::Mixture(m) => Some(m.weight_entropy()),
            Prediction::Point(_) => None,
        };
        let p_terminate = self.model.termination.predict(&st.internal, action, k)?;
        let terminate = self.bernoulli(p_terminate);
        let hit_max_steps = k + 1 >= self.config.max_steps;
        let done = terminate || hit_max_steps;
        if hit_max_steps && !terminate {
            log::debug!("episode hit max_steps = {}", self.config.max_steps);
        }
        let observation = self.model.to_observation(&next)?;

        let spec = &self.config.reward;
        let mut reward = match spec.formulation {
            RewardFormulation::TerminalOnly => 0.0,
            RewardFormulation::TerminalMinusIntensity => -action.intensity(),
            RewardFormulation::SofaLactateShaped => {
                let prev = self.model.stats.denormalize(&st.observation);
                let nxt = self.model.stats.denormalize(&observation);
                shaped_reward(&prev, &nxt, spec)?
            }
        };
        let mut info = StepInfo { p_terminate, mixture_entropy, hit_max_steps, ..Default::default() };
        if done {
            let p_death = self.model.outcome.predict(&st.internal, action, k)?;
            let outcome = if self.bernoulli(p_death) { Outcome::Death } else { Outcome::Release };
            reward += self.config.reward.terminal_reward(outcome);
            info.p_death = Some(p_death);
            info.outcome = Some(outcome);
        }
        if !reward.is_finite() {
            return Err(Error::State("non-finite reward".into()));
        }
        st.internal = next;
        st.observation = observation.clone();
        st.step_count = k + 1;
        st.done = done;
        self.state = Some(st);
        Ok(StepResult { observation, reward, done, info })
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}

/// A closed-loop rollout: `observations[0]` is the start state, then one
/// entry per step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimTrajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<ActionCode>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub outcome: Option<Outcome>,
}

impl SimTrajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Replays the recorded physician actions from the episode's first state. The
/// model only ever sees its own generated states.
pub fn replay_physician(env: &mut WorldModelEnv, episode: &PatientEpisode) -> Result<SimTrajectory> {
    if episode.is_empty() {
        return domain("cannot replay an empty episode");
    }
    let first = env.reset_to(&episode.states[0])?;
    let mut traj = SimTrajectory { observations: vec![first], ..Default::default() };
    for &a in &episode.actions[..episode.n_transitions()] {
        let r = env.step(a)?;
        traj.observations.push(r.observation);
        traj.actions.push(a);
        traj.rewards.push(r.reward);
        traj.dones.push(r.done);
        if r.done {
            traj.outcome = r.info.outcome;
            break;
        }
    }
    Ok(traj)
}

/// Runs `policy` from a fresh reset until the episode ends.
pub fn rollout<E: Environment + ?Sized, P: FnMut(&[f64]) -> Result<ActionCode>>(
    env: &mut E,
    mut policy: P,
    max_steps: usize,
) -> Result<SimTrajectory> {
    let first = env.reset()?;
    let mut traj = SimTrajectory { observations: vec![first], ..Default::default() };
    for _ in 0..max_steps {
        let a = policy(traj.observations.last().expect("non-empty"))?;
        let r = env.step(a)?;
        traj.observations.push(r.observation);
        traj.actions.push(a);
        traj.rewards.push(r.reward);
        traj.dones.push(r.done || r.info.truncated);
        if r.done || r.info.truncated {
            traj.outcome = r.info.outcome;
            break;
        }
    }
    Ok(traj)
}

/// Writes rollouts in the cohort CSV layout (de-normalized) plus a reward column.
/// The start row carries reward 0.
pub fn write_sim_trajectories<W: Write>(trajs: &[(String, SimTrajectory)], stats: &NormalizationStats, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "step".to_string()];
    header.extend(stats.feature_names.iter().cloned());
    header.extend(["action", "terminal", "outcome", "reward"].map(String::from));
    w.write_record(&header)?;
    for (id, t) in trajs {
        for (i, obs) in t.observations.iter().enumerate() {
            let last = i + 1 == t.observations.len();
            let mut row = vec![id.clone(), i.to_string()];
            row.extend(stats.denormalize(obs).iter().map(|v| v.to_string()));
            row.push(t.actions.get(i).map(|a| a.to_string()).unwrap_or_default());
            row.push(if last { "1" } else { "0" }.into());
            row.push(match (last, t.outcome) {
                (true, Some(o)) => (o.label() as u8).to_string(),
                _ => String::new(),
            });
            row.push(if i == 0 { 0.0 } else { t.rewards[i - 1] }.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Ground-truth simulator that steps the synthetic generator directly.
#[derive(Clone, Debug)]
pub struct SyntheticSepsisEnv {
    dynamics: SyntheticDynamics,
    stats: NormalizationStats,
    reward: RewardSpec,
    max_steps: usize,
    rng: ChaCha8Rng,
    latent: Vec<f64>,
    raw: Vec<f64>,
    step_count: usize,
    done: bool,
    started: bool,
}

impl SyntheticSepsisEnv {
    pub fn new(spec: SyntheticDynamicsSpec, stats: NormalizationStats, reward: RewardSpec, max_steps: usize, seed: u64) -> Result<Self> {
        reward.validate()?;
        if max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        Ok(Self {
            dynamics: SyntheticDynamics::new(spec)?,
            stats,
            reward,
            max_steps,
            rng: ChaCha8Rng::seed_from_u64(seed),
            latent: Vec::new(),
            raw: Vec::new(),
            step_count: 0,
            done: false,
            started: false,
        })
    }
}

impl Environment for SyntheticSepsisEnv {
    fn observation_dim(&self) -> usize {
        N_FEATURES
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        self.latent = self.dynamics.initial_latent(&mut self.rng);
        self.raw = self.dynamics.emit(&self.latent, &mut self.rng);
        self.step_count = 0;
        self.done = false;
        self.started = true;
        Ok(self.stats.normalize(&self.raw))
    }

    fn step(&mut self, action: ActionCode) -> Result<StepResult> {
        if !self.started || self.done {
            return Err(Error::State("step called on a finished or unstarted episode".into()));
        }
        let k = self.step_count;
        let p_terminate = self.dynamics.hazard(&self.latent, k);
        let hit_max_steps = k + 1 >= self.max_steps;
        let terminate = self.rng.random::<f64>() < p_terminate;
        let done = terminate || hit_max_steps;
        let mut info = StepInfo { p_terminate, hit_max_steps, ..Default::default() };
        let mut terminal_bonus = 0.0;
        if done {
            let p_death = self.dynamics.death_probability(&self.latent);
            let outcome = if self.rng.random::<f64>() < p_death { Outcome::Death } else { Outcome::Release };
            terminal_bonus = self.reward.terminal_reward(outcome);
            info.p_death = Some(p_death);
            info.outcome = Some(outcome);
        }
        let next = self.dynamics.transition(&self.latent, action, &mut self.rng);
        let raw = self.dynamics.emit(&next, &mut self.rng);
        let step_reward = match self.reward.formulation {
            RewardFormulation::TerminalOnly => 0.0,
            RewardFormulation::TerminalMinusIntensity => -action.intensity(),
            RewardFormulation::SofaLactateShaped => shaped_reward(&self.raw, &raw, &self.reward)?,
        };
        self.latent = next;
        self.raw = raw;
        self.step_count = k + 1;
        self.done = done;
        Ok(StepResult { observation: self.stats.normalize(&self.raw), reward: step_reward + terminal_bonus, done, info })
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}

/// One state, one step: `best_action` pays `+1`, everything else `0`.
#[derive(Clone, Debug)]
pub struct BanditEnv {
    pub best_action: ActionCode,
    done: bool,
}

impl BanditEnv {
    pub fn new(best_action: ActionCode) -> Self {
        Self { best_action, done: true }
    }
}

impl Environment for BanditEnv {
    fn observation_dim(&self) -> usize {
        1
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        self.done = false;
        Ok(vec![1.0])
    }

    fn step(&mut self, action: ActionCode) -> Result<StepResult> {
        if self.done {
            return Err(Error::State("bandit episode already finished".into()));
        }
        self.done = true;
        let reward = if action == self.best_action { 1.0 } else { 0.0 };
        Ok(StepResult { observation: vec![1.0], reward, done: true, info: StepInfo::default() })
    }

    fn reseed(&mut self, _seed: u64) {}
}

/// Deterministic two-state chain. From `s0`, action 1 moves to `s1`; from
/// `s1`, action 2 ends the episode with reward 1 and action 0 returns to
/// `s0`. Every other action stays put with reward 0. Observations are one-hot.
#[derive(Clone, Debug)]
pub struct TwoStateEnv {
    pub time_limit: usize,
    state: usize,
    steps: usize,
    done: bool,
}

impl TwoStateEnv {
    pub fn new(time_limit: usize) -> Self {
        Self { time_limit, state: 0, steps: 0, done: true }
    }

    fn obs(&self) -> Vec<f64> {
        let mut v = vec![0.0; 2];
        v[self.state] = 1.0;
        v
    }

    /// `(next_state, reward, terminal)` of the deterministic dynamics.
    pub fn transition(state: usize, action: usize) -> (usize, f64, bool) {
        match (state, action) {
            (0, 1) => (1, 0.0, false),
            (1, 2) => (1, 1.0, true),
            (1, 0) => (0, 0.0, false),
            (s, _) => (s, 0.0, false),
        }
    }

    /// Optimal action values by value iteration.
    pub fn optimal_q(gamma: f64) -> [[f64; N_ACTIONS]; 2] {
        let mut q = [[0.0; N_ACTIONS]; 2];
        for _ in 0..10_000 {
            let v = [q[0].iter().copied().fold(f64::MIN, f64::max), q[1].iter().copied().fold(f64::MIN, f64::max)];
            let mut next = q;
            for (s, row) in next.iter_mut().enumerate() {
                for (a, cell) in row.iter_mut().enumerate() {
                    let (s2, r, term) = Self::transition(s, a);
                    *cell = r + if term { 0.0 } else { gamma * v[s2] };
                }
            }
            q = next;
        }
        q
    }
}

impl Environment for TwoStateEnv {
    fn observation_dim(&self) -> usize {
        2
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        self.state = 0;
        self.steps = 0;
        self.done = false;
        Ok(self.obs())
    }

    fn step(&mut self, action: ActionCode) -> Result<StepResult> {
        if self.done {
            return Err(Error::State("episode already finished".into()));
        }
        let (s2, reward, terminal) = Self::transition(self.state, action.code());
        self.state = s2;
        self.steps += 1;
        let truncated = !terminal && self.steps >= self.time_limit;
        self.done = terminal || truncated;
        Ok(StepResult { observation: self.obs(), reward, done: terminal, info: StepInfo { truncated, ..Default::default() } })
    }

    fn reseed(&mut self, _seed: u64) {}
}
