//! Episode-termination and outcome classifiers over
//! `state ⊕ one_hot(action) ⊕ step / max_length`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ActionCode, Cohort, N_ACTIONS, N_FEATURES};
use crate::error::{domain, Error, Result};
use crate::learner::{
    fit, sigmoid, Activation, Checkpoint, FitHistory, Mlp, NodeId, OptimizerConfig, ParamStore, Tape, TrainSchedule, Trainable,
};
use crate::state_model::episode_inputs;
use crate::vae::Autoencoder;

pub const DEFAULT_MAX_LENGTH: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Termination,
    Outcome,
}

impl HeadKind {
    pub fn model_kind(self) -> &'static str {
        match self {
            HeadKind::Termination => "termination",
            HeadKind::Outcome => "outcome",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Divisor applied to the step number before it enters the network.
    pub max_length: usize,
    pub init_seed: u64,
    pub encoder_hash: Option<String>,
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        Self { kind, input_dim: N_FEATURES, hidden: vec![64, 64], max_length: DEFAULT_MAX_LENGTH, init_seed: 0, encoder_hash: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSample {
    pub features: Vec<f64>,
    pub label: f64,
}

#[derive(Clone, Debug)]
pub struct BinaryHead {
    config: HeadConfig,
    store: ParamStore,
    net: Mlp,
}

pub type TerminationModel = BinaryHead;
pub type OutcomeModel = BinaryHead;

pub fn head_features(state: &[f64], action: ActionCode, step: usize, max_length: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(state.len() + N_ACTIONS + 1);
    x.extend_from_slice(state);
    x.extend_from_slice(&action.one_hot());
    x.push(step as f64 / max_length as f64);
    x
}

impl BinaryHead {
    pub fn new(config: HeadConfig) -> Result<Self> {
        if config.input_dim == 0 || config.max_length == 0 {
            return Err(Error::Config(format!("invalid head config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let mut dims = vec![config.input_dim + N_ACTIONS + 1];
        dims.extend(&config.hidden);
        dims.push(1);
        let net = Mlp::new(&mut store, config.kind.model_kind(), &dims, Activation::ReLU, Activation::Linear, &mut rng)?;
        Ok(Self { config, store, net })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn kind(&self) -> HeadKind {
        self.config.kind
    }

    pub fn output_layer(&self) -> &crate::learner::Dense {
        self.net.output_layer()
    }

    pub fn features(&self, state: &[f64], action: ActionCode, step: usize) -> Result<Vec<f64>> {
        if state.len() != self.config.input_dim {
            return domain(format!("head input has length {}, expected {}", state.len(), self.config.input_dim));
        }
        if state.iter().any(|v| !v.is_finite()) {
            return domain("head input contains non-finite values");
        }
        Ok(head_features(state, action, step, self.config.max_length))
    }

    pub fn logit(&self, state: &[f64], action: ActionCode, step: usize) -> Result<f64> {
        let x = self.features(state, action, step)?;
        Ok(self.net.apply(&self.store, &x)?[0])
    }

    pub fn predict(&self, state: &[f64], action: ActionCode, step: usize) -> Result<f64> {
        Ok(sigmoid(self.logit(state, action, step)?))
    }

    pub fn record_loss_with(&self, store: &ParamStore, tape: &mut Tape, sample: &HeadSample) -> Result<NodeId> {
        let x = tape.leaf(sample.features.clone());
        let logit = self.net.forward(tape, store, x)?;
        tape.bce_with_logits(logit, sample.label)
    }

    /// Probabilities for pre-built feature rows.
    pub fn predict_samples(&self, samples: &[HeadSample]) -> Result<Vec<f64>> {
        samples.iter().map(|s| Ok(sigmoid(self.net.apply(&self.store, &s.features)?[0]))).collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(self.config.kind.model_kind(), serde_json::to_value(&self.config)?, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(&["termination", "outcome"])?;
        let config: HeadConfig = ck.hyperparams()?;
        if config.kind.model_kind() != ck.model_kind {
            return Err(Error::Checkpoint("checkpoint model_kind disagrees with its head kind".into()));
        }
        let mut m = Self::new(config)?;
        ck.restore_into(&mut m.store)?;
        Ok(m)
    }
}

impl Trainable for BinaryHead {
    type Sample = HeadSample;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn record_loss(&self, tape: &mut Tape, sample: &HeadSample, _rng: &mut ChaCha8Rng) -> Result<NodeId> {
        self.record_loss_with(&self.store, tape, sample)
    }
}

/// Termination rows cover every step (label: last step of the stay); outcome
/// rows cover only the last step (label: death).
pub fn build_head_samples(cohort: &Cohort, encoder: Option<&Autoencoder>, kind: HeadKind, max_length: usize) -> Result<Vec<HeadSample>> {
    let mut out = Vec::new();
    for ep in &cohort.episodes {
        let inputs = episode_inputs(&ep.states, encoder)?;
        let last = ep.len() - 1;
        match kind {
            HeadKind::Termination => {
                for (t, s) in inputs.iter().enumerate() {
                    out.push(HeadSample {
                        features: head_features(s, ep.actions[t], t, max_length),
                        label: if t == last { 1.0 } else { 0.0 },
                    });
                }
            }
            HeadKind::Outcome => out
                .push(HeadSample { features: head_features(&inputs[last], ep.actions[last], last, max_length), label: ep.outcome.label() }),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub samples: usize,
    pub positives: usize,
    pub positive_rate: f64,
}

impl ClassBalance {
    pub fn of(samples: &[HeadSample]) -> Self {
        let positives = samples.iter().filter(|s| s.label > 0.5).count();
        let rate = if samples.is_empty() { 0.0 } else { positives as f64 / samples.len() as f64 };
        Self { samples: samples.len(), positives, positive_rate: rate }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedHeads {
    pub termination: TerminationModel,
    pub outcome: OutcomeModel,
    pub termination_history: FitHistory,
    pub outcome_history: FitHistory,
    pub termination_balance: ClassBalance,
    pub outcome_balance: ClassBalance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadsTrainingConfig {
    pub hidden: Vec<usize>,
    pub max_length: usize,
    pub init_seed: u64,
}

impl Default for HeadsTrainingConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], max_length: DEFAULT_MAX_LENGTH, init_seed: 0 }
    }
}

pub fn train_heads(
    train: &Cohort,
    val: &Cohort,
    encoder: Option<&Autoencoder>,
    config: &HeadsTrainingConfig,
    schedule: &TrainSchedule,
    optimizer: OptimizerConfig,
) -> Result<TrainedHeads> {
    if train.is_empty() {
        return domain("cannot train heads on an empty cohort");
    }
    let input_dim = encoder.map(|e| e.latent_dim()).unwrap_or(N_FEATURES);
    let encoder_hash = encoder.map(|e| e.to_checkpoint().and_then(|c| c.content_hash())).transpose()?;
    let train_one = |kind: HeadKind, seed_offset: u64| -> Result<(BinaryHead, FitHistory, ClassBalance)> {
        let tr = build_head_samples(train, encoder, kind, config.max_length)?;
        let va = if val.is_empty() { Vec::new() } else { build_head_samples(val, encoder, kind, config.max_length)? };
        let balance = ClassBalance::of(&tr);
        if kind == HeadKind::Termination && balance.positives == 0 {
            return domain("cohort has no terminal steps");
        }
        log::info!(
            "{} head: {} samples, {} positive ({:.2}%)",
            kind.model_kind(),
            balance.samples,
            balance.positives,
            100.0 * balance.positive_rate
        );
        let mut head = BinaryHead::new(HeadConfig {
            kind,
            input_dim,
            hidden: config.hidden.clone(),
            max_length: config.max_length,
            init_seed: config.init_seed.wrapping_add(seed_offset),
            encoder_hash: encoder_hash.clone(),
        })?;
        let sched = TrainSchedule { seed: schedule.seed.wrapping_add(seed_offset), ..*schedule };
        let history = fit(&mut head, &tr, &va, &sched, optimizer)?;
        Ok((head, history, balance))
    };
    let (termination, termination_history, termination_balance) = train_one(HeadKind::Termination, 0)?;
    let (outcome, outcome_history, outcome_balance) = train_one(HeadKind::Outcome, 1)?;
    Ok(TrainedHeads { termination, outcome, termination_history, outcome_history, termination_balance, outcome_balance })
}

/// Fraction of samples classified correctly at threshold 0.5.
pub fn accuracy(probs: &[f64], labels: &[f64]) -> f64 {
    if probs.is_empty() {
        return f64::NAN;
    }
    let hits = probs.iter().zip(labels).filter(|(p, l)| (**p >= 0.5) == (**l > 0.5)).count();
    hits as f64 / probs.len() as f64
}

/// Area under the ROC curve via the rank-sum statistic (ties count half).
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return domain("scores and labels differ in length");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|l| **l > 0.5).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return domain("AUC needs both classes");
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l > 0.5).map(|(r, _)| r).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Mean and standard deviation of the AUC under `rounds` label permutations.
pub fn shuffled_auc_baseline(scores: &[f64], labels: &[f64], rounds: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = labels.to_vec();
    let mut aucs = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        perm.shuffle(&mut rng);
        aucs.push(roc_auc(scores, &perm)?);
    }
    let n = aucs.len() as f64;
    let mean = aucs.iter().sum::<f64>() / n;
    let sd = (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    Ok((mean, sd))
}
