//! DQN: replay buffer, target network, linearly annealed ε-greedy exploration.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ActionCode, N_ACTIONS, N_FEATURES};
use crate::env::{Environment, SimTrajectory};
use crate::error::{domain, Error, Result};
use crate::learner::{Activation, Checkpoint, Mlp, NodeId, Optimizer, OptimizerConfig, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNetConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub init_seed: u64,
}

impl Default for QNetConfig {
    fn default() -> Self {
        Self { input_dim: N_FEATURES, hidden: vec![128, 128], init_seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct QNetwork {
    config: QNetConfig,
    store: ParamStore,
    net: Mlp,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl QNetwork {
    pub fn new(config: QNetConfig) -> Result<Self> {
        if config.input_dim == 0 {
            return Err(Error::Config("Q-network input_dim must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden);
        dims.push(N_ACTIONS);
        let net = Mlp::new(&mut store, "qnet", &dims, Activation::Tanh, Activation::Linear, &mut rng)?;
        Ok(Self { config, store, net })
    }

    pub fn config(&self) -> &QNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn output_layer(&self) -> &crate::learner::Dense {
        self.net.output_layer()
    }

    pub fn copy_from(&mut self, other: &QNetwork) {
        self.store.copy_values_from(&other.store);
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.config.input_dim {
            return domain(format!("observation has length {}, expected {}", obs.len(), self.config.input_dim));
        }
        self.net.apply(&self.store, obs)
    }

    pub fn record_q(&self, store: &ParamStore, tape: &mut Tape, obs: &[f64]) -> Result<NodeId> {
        let x = tape.leaf(obs.to_vec());
        self.net.forward(tape, store, x)
    }

    pub fn greedy(&self, obs: &[f64]) -> Result<ActionCode> {
        ActionCode::new(argmax(&self.q_values(obs)?))
    }

    /// Squared TD error of one transition against a fixed target value.
    pub fn record_td_loss(&self, store: &ParamStore, tape: &mut Tape, obs: &[f64], action: ActionCode, target: f64) -> Result<NodeId> {
        let q = self.record_q(store, tape, obs)?;
        let qa = tape.slice(q, action.code(), 1)?;
        tape.mse(qa, &[target])
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store("qnet", serde_json::to_value(&self.config)?, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(&["qnet"])?;
        let mut q = Self::new(ck.hyperparams()?)?;
        ck.restore_into(&mut q.store)?;
        Ok(q)
    }
}

/// With probability `epsilon` a uniform action, otherwise the greedy one.
pub fn act<R: Rng + ?Sized>(net: &QNetwork, obs: &[f64], epsilon: f64, rng: &mut R) -> Result<ActionCode> {
    if !(0.0..=1.0).contains(&epsilon) {
        return domain(format!("epsilon {epsilon} outside [0, 1]"));
    }
    if rng.random::<f64>() < epsilon {
        ActionCode::new(rng.random_range(0..N_ACTIONS))
    } else {
        net.greedy(obs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: ActionCode,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// True terminal state (no bootstrap). Time-limit cuts stay `false`.
    pub done: bool,
}

/// Fixed-capacity ring buffer; the oldest transition is overwritten first.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be >= 1".into()));
        }
        Ok(Self { capacity, items: Vec::new(), next: 0 })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` distinct transitions, uniformly at random.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if n == 0 || n > self.items.len() {
            return domain(format!("cannot sample {n} from a buffer of {}", self.items.len()));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect())
    }
}

/// `r + gamma * (1 - done) * max_a' Q_target(s', a')` per transition.
pub fn td_targets(target: &QNetwork, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            if t.done || gamma == 0.0 {
                Ok(t.reward)
            } else {
                let q = target.q_values(&t.next_obs)?;
                Ok(t.reward + gamma * q[argmax(&q)])
            }
        })
        .collect()
}

/// One gradient step regressing `Q(s, a)` on the TD targets; returns the
/// batch MSE before the update.
pub fn td_update(net: &mut QNetwork, target: &QNetwork, batch: &[&Transition], gamma: f64, optimizer: &mut Optimizer) -> Result<f64> {
    if batch.is_empty() {
        return domain("empty TD batch");
    }
    let ys = td_targets(target, batch, gamma)?;
    net.store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut tape = Tape::new();
    let mut total = 0.0;
    for (t, y) in batch.iter().zip(&ys) {
        tape.clear();
        let loss = net.record_td_loss(&net.store, &mut tape, &t.obs, t.action, *y)?;
        total += tape.scalar(loss);
        tape.backward_scaled(loss, scale, &mut net.store)?;
    }
    optimizer.step(&mut net.store);
    Ok(total * scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    pub target_sync: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Environment steps collected before the first update.
    pub learning_starts: usize,
    /// Environment steps between updates.
    pub train_every: usize,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 20_000,
            target_sync: 500,
            buffer_capacity: 50_000,
            batch_size: 64,
            total_steps: 100_000,
            learning_starts: 1_000,
            train_every: 1,
            learning_rate: 1e-3,
            clip_norm: Some(10.0),
            hidden: vec![128, 128],
            seed: 0,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.gamma) || !unit.contains(&self.epsilon_start) || !unit.contains(&self.epsilon_end) {
            return Err(Error::Config("gamma and epsilon must lie in [0, 1]".into()));
        }
        if self.target_sync == 0 || self.batch_size == 0 || self.buffer_capacity == 0 || self.train_every == 0 {
            return Err(Error::Config("target_sync, batch_size, buffer_capacity, train_every must be >= 1".into()));
        }
        if self.batch_size > self.buffer_capacity {
            return Err(Error::Config("batch_size exceeds buffer_capacity".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Linear anneal from `epsilon_start` to `epsilon_end`, then constant.
    pub fn epsilon(&self, step: usize) -> f64 {
        if self.epsilon_decay_steps == 0 || step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    #[serde(rename = "return")]
    pub total_return: f64,
    pub length: usize,
    pub epsilon: f64,
}

/// Step-wise DQN learner; `train_agent` drives it to completion.
#[derive(Clone, Debug)]
pub struct DqnLearner {
    config: DqnConfig,
    online: QNetwork,
    target: QNetwork,
    buffer: ReplayBuffer,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    steps: usize,
    obs: Option<Vec<f64>>,
    episode_return: f64,
    episode_length: usize,
    episodes: usize,
    last_loss: Option<f64>,
}

impl DqnLearner {
    pub fn new(config: DqnConfig, obs_dim: usize) -> Result<Self> {
        config.validate()?;
        let online = QNetwork::new(QNetConfig { input_dim: obs_dim, hidden: config.hidden.clone(), init_seed: config.seed })?;
        let target = online.clone();
        let mut opt = OptimizerConfig::adam(config.learning_rate);
        opt.clip_norm = config.clip_norm;
        let optimizer = Optimizer::new(opt, online.params())?;
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xd9_u64),
            config,
            online,
            target,
            optimizer,
            steps: 0,
            obs: None,
            episode_return: 0.0,
            episode_length: 0,
            episodes: 0,
            last_loss: None,
        })
    }

    pub fn online(&self) -> &QNetwork {
        &self.online
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    /// One environment step plus any due update and sync. Returns the episode
    /// record when an episode ends.
    pub fn step<E: Environment + ?Sized>(&mut self, env: &mut E) -> Result<Option<EpisodeRecord>> {
        let obs = match self.obs.take() {
            Some(o) => o,
            None => env.reset()?,
        };
        let eps = self.config.epsilon(self.steps);
        let action = act(&self.online, &obs, eps, &mut self.rng)?;
        let r = env.step(action)?;
        self.buffer.push(Transition { obs, action, reward: r.reward, next_obs: r.observation.clone(), done: r.done });
        self.steps += 1;
        self.episode_return += r.reward;
        self.episode_length += 1;

        let ready = self.buffer.len() >= self.config.batch_size.max(self.config.learning_starts);
        if ready && self.steps % self.config.train_every == 0 {
            let batch: Vec<Transition> = self.buffer.sample(self.config.batch_size, &mut self.rng)?.into_iter().cloned().collect();
            let refs: Vec<&Transition> = batch.iter().collect();
            self.last_loss = Some(td_update(&mut self.online, &self.target, &refs, self.config.gamma, &mut self.optimizer)?);
        }
        if self.steps % self.config.target_sync == 0 {
            self.target.copy_from(&self.online);
        }

        if r.done || r.info.truncated {
            let rec =
                EpisodeRecord { episode: self.episodes, total_return: self.episode_return, length: self.episode_length, epsilon: eps };
            self.episodes += 1;
            self.episode_return = 0.0;
            self.episode_length = 0;
            Ok(Some(rec))
        } else {
            self.obs = Some(r.observation);
            Ok(None)
        }
    }

    pub fn into_policy(self) -> QNetwork {
        self.online
    }
}

#[derive(Clone, Debug)]
pub struct TrainedAgent {
    pub policy: QNetwork,
    pub curve: Vec<EpisodeRecord>,
}

/// Runs `config.total_steps` environment steps; the environment is reseeded
/// from `config.seed` first so runs are reproducible.
pub fn train_agent<E: Environment + ?Sized>(env: &mut E, config: &DqnConfig) -> Result<TrainedAgent> {
    env.reseed(config.seed);
    let mut learner = DqnLearner::new(config.clone(), env.observation_dim())?;
    let mut curve = Vec::new();
    for _ in 0..config.total_steps {
        if let Some(rec) = learner.step(env)? {
            curve.push(rec);
        }
    }
    Ok(TrainedAgent { policy: learner.into_policy(), curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub action_counts: Vec<usize>,
    pub lengths: Vec<usize>,
    pub returns: Vec<f64>,
}

impl PolicyStats {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    /// Standard error of the mean return.
    pub fn return_std_error(&self) -> f64 {
        let n = self.returns.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let m = self.mean_return();
        (self.returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    }

    pub fn record(&mut self, t: &SimTrajectory) {
        for a in &t.actions {
            self.action_counts[a.code()] += 1;
        }
        self.lengths.push(t.len());
        self.returns.push(t.total_return());
    }

    pub fn empty() -> Self {
        Self { action_counts: vec![0; N_ACTIONS], lengths: Vec::new(), returns: Vec::new() }
    }
}

/// Rolls out `policy` for `n_episodes` and collects actions, lengths and returns.
pub fn collect_policy_stats<E, P>(env: &mut E, mut policy: P, n_episodes: usize, max_steps: usize) -> Result<PolicyStats>
where
    E: Environment + ?Sized,
    P: FnMut(&[f64]) -> Result<ActionCode>,
{
    if n_episodes == 0 {
        return domain("n_episodes must be >= 1");
    }
    let mut stats = PolicyStats::empty();
    for _ in 0..n_episodes {
        let t = crate::env::rollout(env, &mut policy, max_steps)?;
        stats.record(&t);
    }
    Ok(stats)
}

/// Greedy rollouts of `policy`.
pub fn policy_histogram<E: Environment + ?Sized>(
    policy: &QNetwork,
    env: &mut E,
    n_episodes: usize,
    max_steps: usize,
) -> Result<PolicyStats> {
    collect_policy_stats(env, |obs| policy.greedy(obs), n_episodes, max_steps)
}

pub fn write_reward_curve<W: Write>(curve: &[EpisodeRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in curve {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{BanditEnv, TwoStateEnv};

    fn obs1() -> Vec<f64> {
        vec![1.0]
    }

    #[test]
    fn argmax_ties_and_shift_invariance() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 25]), 0);
        let q = [0.3, -1.0, 2.5, 2.4];
        let shifted: Vec<f64> = q.iter().map(|v| 2.0 * v + 7.0).collect();
        assert_eq!(argmax(&q), argmax(&shifted));
    }

    #[test]
    fn zeroed_network_picks_action_zero() {
        let mut q = QNetwork::new(QNetConfig { input_dim: 1, ..Default::default() }).unwrap();
        let out = *q.output_layer();
        out.zero(q.params_mut());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(act(&q, &obs1(), 0.0, &mut rng).unwrap().code(), 0);
        assert!(act(&q, &obs1(), 1.5, &mut rng).is_err());
    }

    #[test]
    fn replay_buffer_evicts_oldest() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(Transition {
                obs: vec![i as f64],
                action: ActionCode::new(0).unwrap(),
                reward: i as f64,
                next_obs: vec![0.0],
                done: false,
            });
            assert!(b.len() <= 3);
        }
        let mut rewards: Vec<f64> = b.iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = b.sample(3, &mut rng).unwrap();
        let mut seen: Vec<f64> = s.iter().map(|t| t.reward).collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 3);
        assert!(b.sample(4, &mut rng).is_err());
    }

    #[test]
    fn td_targets_for_done_and_zero_gamma() {
        let q = QNetwork::new(QNetConfig { input_dim: 1, init_seed: 3, ..Default::default() }).unwrap();
        let t1 = Transition { obs: obs1(), action: ActionCode::new(2).unwrap(), reward: 1.5, next_obs: obs1(), done: true };
        let t2 = Transition { done: false, ..t1.clone() };
        assert_eq!(td_targets(&q, &[&t1], 0.99).unwrap(), vec![1.5]);
        assert_eq!(td_targets(&q, &[&t2], 0.0).unwrap(), vec![1.5]);
        let qs = q.q_values(&obs1()).unwrap();
        let expected = 1.5 + 0.5 * qs.iter().copied().fold(f64::MIN, f64::max);
        assert!((td_targets(&q, &[&t2], 0.5).unwrap()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn epsilon_schedule() {
        let c = DqnConfig { epsilon_decay_steps: 100, ..Default::default() };
        assert_eq!(c.epsilon(0), 1.0);
        assert!((c.epsilon(50) - 0.525).abs() < 1e-12);
        assert_eq!(c.epsilon(100), 0.05);
        assert_eq!(c.epsilon(10_000), 0.05);
        assert!(DqnConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn target_network_changes_only_at_syncs() {
        let cfg = DqnConfig {
            target_sync: 7,
            batch_size: 4,
            learning_starts: 4,
            buffer_capacity: 100,
            hidden: vec![8],
            total_steps: 30,
            ..Default::default()
        };
        let mut env = BanditEnv::new(ActionCode::new(3).unwrap());
        let mut learner = DqnLearner::new(cfg, 1).unwrap();
        let mut prev_target = learner.target().params().snapshot();
        for _ in 0..30 {
            learner.step(&mut env).unwrap();
            let now = learner.target().params().snapshot();
            if learner.steps() % 7 == 0 {
                assert_eq!(now, learner.online().params().snapshot());
            } else {
                assert_eq!(now, prev_target);
            }
            prev_target = now;
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let cfg = DqnConfig {
            batch_size: 8,
            learning_starts: 8,
            hidden: vec![16],
            total_steps: 200,
            epsilon_decay_steps: 100,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut env = TwoStateEnv::new(10);
            train_agent(&mut env, &cfg).unwrap().curve
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn histogram_bookkeeping() {
        let mut env = BanditEnv::new(ActionCode::new(3).unwrap());
        let stats = collect_policy_stats(&mut env, |_| ActionCode::new(9), 1, 10).unwrap();
        assert_eq!(stats.lengths, vec![1]);
        assert_eq!(stats.returns.len(), 1);
        let mut env = TwoStateEnv::new(6);
        let stats = collect_policy_stats(&mut env, |_| ActionCode::new(4), 3, 100).unwrap();
        assert_eq!(stats.action_counts.iter().sum::<usize>(), stats.lengths.iter().sum::<usize>());
        assert_eq!(stats.action_counts.iter().filter(|c| **c > 0).count(), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let q = QNetwork::new(QNetConfig { init_seed: 2, ..Default::default() }).unwrap();
        let back = QNetwork::from_checkpoint(&Checkpoint::from_json(&q.to_checkpoint().unwrap().to_json().unwrap()).unwrap()).unwrap();
        let o = vec![0.1; N_FEATURES];
        assert_eq!(q.q_values(&o).unwrap(), back.q_values(&o).unwrap());
    }
}
