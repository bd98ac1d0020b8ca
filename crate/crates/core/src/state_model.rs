//! Next-state dynamics: an LSTM over a fixed window of `(state, action)`
//! pairs with either a point-regression head or a Gaussian-mixture head.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ActionCode, Cohort, N_ACTIONS, N_FEATURES};
use crate::error::{domain, Error, Result};
use crate::learner::tape::HALF_LN_2PI;
use crate::learner::{
    fit, log_sum_exp, Activation, Checkpoint, Dense, FitHistory, LstmCell, MixtureParams, NodeId, OptimizerConfig, ParamStore, Tape,
    TrainSchedule, Trainable,
};
use crate::vae::{Autoencoder, AutoencoderKind};

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_MIXTURES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "AE+RNN")]
    AeRnn,
    #[serde(rename = "VAE+RNN")]
    VaeRnn,
    #[serde(rename = "MDN+RNN")]
    MdnRnn,
    #[serde(rename = "VAE+MDN+RNN")]
    VaeMdnRnn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Rnn, Variant::AeRnn, Variant::VaeRnn, Variant::MdnRnn, Variant::VaeMdnRnn];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Rnn => "RNN",
            Variant::AeRnn => "AE+RNN",
            Variant::VaeRnn => "VAE+RNN",
            Variant::MdnRnn => "MDN+RNN",
            Variant::VaeMdnRnn => "VAE+MDN+RNN",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.label().eq_ignore_ascii_case(s)).ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn uses_mdn(self) -> bool {
        matches!(self, Variant::MdnRnn | Variant::VaeMdnRnn)
    }

    /// Encoder the variant runs in, if it works in a latent space.
    pub fn encoder_kind(self) -> Option<AutoencoderKind> {
        match self {
            Variant::AeRnn => Some(AutoencoderKind::Ae),
            Variant::VaeRnn | Variant::VaeMdnRnn => Some(AutoencoderKind::Vae),
            Variant::Rnn | Variant::MdnRnn => None,
        }
    }

    pub fn model_kind(self) -> &'static str {
        if self.uses_mdn() {
            "state_mdn"
        } else {
            "state_rnn"
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateModelConfig {
    pub variant: Variant,
    pub input_dim: usize,
    pub window: usize,
    pub rnn_hidden: usize,
    pub mixtures: usize,
    /// Predict `s_{t+1} - s_t` and add the current state back.
    pub residual: bool,
    pub init_seed: u64,
    /// Content hash of the encoder checkpoint the model was trained against.
    pub encoder_hash: Option<String>,
}

impl StateModelConfig {
    pub fn new(variant: Variant) -> Self {
        let input_dim = if variant.encoder_kind().is_some() { crate::vae::LATENT_DIM } else { N_FEATURES };
        Self {
            variant,
            input_dim,
            window: DEFAULT_WINDOW,
            rnn_hidden: DEFAULT_HIDDEN,
            mixtures: if variant.uses_mdn() { DEFAULT_MIXTURES } else { 1 },
            residual: true,
            init_seed: 0,
            encoder_hash: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.input_dim == 0 || self.rnn_hidden == 0 {
            return Err(Error::Config("input_dim and rnn_hidden must be >= 1".into()));
        }
        if self.variant.uses_mdn() && self.mixtures == 0 {
            return Err(Error::Config("MDN variants need at least one mixture component".into()));
        }
        Ok(())
    }

    fn head_outputs(&self) -> usize {
        if self.variant.uses_mdn() {
            self.mixtures * (1 + 2 * self.input_dim)
        } else {
            self.input_dim
        }
    }
}

/// The last `window` `(state, action)` pairs, oldest first. Missing entries at
/// the front read as all-zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryWindow {
    window: usize,
    dim: usize,
    states: VecDeque<Vec<f64>>,
    actions: VecDeque<ActionCode>,
}

impl HistoryWindow {
    pub fn new(window: usize, dim: usize) -> Self {
        Self { window, dim, states: VecDeque::with_capacity(window), actions: VecDeque::with_capacity(window) }
    }

    /// Window ending at the pair `(states[t], actions[t])`.
    pub fn ending_at(states: &[Vec<f64>], actions: &[ActionCode], t: usize, window: usize) -> Result<Self> {
        if t >= states.len() || t >= actions.len() {
            return domain(format!("window end {t} outside a history of {} states", states.len()));
        }
        let dim = states[t].len();
        let mut w = Self::new(window, dim);
        let start = (t + 1).saturating_sub(window);
        for i in start..=t {
            w.push(states[i].clone(), actions[i])?;
        }
        Ok(w)
    }

    pub fn push(&mut self, state: Vec<f64>, action: ActionCode) -> Result<()> {
        if state.len() != self.dim {
            return domain(format!("window state has length {}, expected {}", state.len(), self.dim));
        }
        if self.states.len() == self.window {
            self.states.pop_front();
            self.actions.pop_front();
        }
        self.states.push_back(state);
        self.actions.push_back(action);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.states.clear();
        self.actions.clear();
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filled(&self) -> usize {
        self.states.len()
    }

    pub fn padding(&self) -> usize {
        self.window - self.states.len()
    }

    /// Most recent state, or zeros for an empty window.
    pub fn current_state(&self) -> Vec<f64> {
        self.states.back().cloned().unwrap_or_else(|| vec![0.0; self.dim])
    }

    pub fn states(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.states.iter()
    }

    /// Network input rows, `state ⊕ one_hot(action)`, front-padded with zeros.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let width = self.dim + N_ACTIONS;
        let mut rows = vec![vec![0.0; width]; self.padding()];
        for (s, a) in self.states.iter().zip(&self.actions) {
            let mut r = Vec::with_capacity(width);
            r.extend_from_slice(s);
            r.extend_from_slice(&a.one_hot());
            rows.push(r);
        }
        rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Point(Vec<f64>),
    Mixture(MixtureParams),
}

impl Prediction {
    /// Point value, or the mixture mean.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            Prediction::Point(p) => p.clone(),
            Prediction::Mixture(m) => m.mean(),
        }
    }
}

/// `softmax(ln pi / tau)`.
pub fn tempered_weights(weights: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return domain(format!("temperature must be positive, got {tau}"));
    }
    let logits: Vec<f64> = weights.iter().map(|w| w.ln() / tau).collect();
    let lse = log_sum_exp(&logits);
    Ok(logits.iter().map(|l| (l - lse).exp()).collect())
}

/// Draws a component from `softmax(ln pi / tau)` and a value from
/// `N(mu_k, sigma_k^2 * tau)`.
pub fn sample_next<R: Rng + ?Sized>(params: &MixtureParams, tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    params.validate()?;
    let k = sample_component(params, tau, rng)?;
    let scale = tau.sqrt();
    Ok(params.means[k].iter().zip(&params.stddevs[k]).map(|(m, s)| m + s * scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

pub fn sample_component<R: Rng + ?Sized>(params: &MixtureParams, tau: f64, rng: &mut R) -> Result<usize> {
    let w = tempered_weights(&params.weights, tau)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in w.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(k);
        }
    }
    Ok(w.iter().rposition(|p| *p > 0.0).unwrap_or(w.len() - 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub subject_id: String,
    /// Index of the last real step in the window.
    pub step: usize,
    pub window: HistoryWindow,
    pub target: Vec<f64>,
}

/// Encodes every state of an episode with `encoder` (posterior mean), or
/// copies the normalized states when there is none.
pub fn episode_inputs(states: &[crate::data::StateVector], encoder: Option<&Autoencoder>) -> Result<Vec<Vec<f64>>> {
    states
        .iter()
        .map(|s| match encoder {
            Some(e) => e.encode_mean(s),
            None => Ok(s.to_vec()),
        })
        .collect()
}

/// One pair per in-episode transition; windows never cross episodes.
pub fn build_training_sequences(cohort: &Cohort, encoder: Option<&Autoencoder>, window: usize) -> Result<Vec<TrainingPair>> {
    if cohort.is_empty() {
        return domain("cohort has no episodes");
    }
    if window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let mut pairs = Vec::with_capacity(cohort.n_transitions());
    for ep in &cohort.episodes {
        if ep.len() < 2 {
            continue;
        }
        let inputs = episode_inputs(&ep.states, encoder)?;
        for t in 0..ep.n_transitions() {
            pairs.push(TrainingPair {
                subject_id: ep.subject_id.clone(),
                step: t,
                window: HistoryWindow::ending_at(&inputs, &ep.actions, t, window)?,
                target: inputs[t + 1].clone(),
            });
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug)]
pub struct StateModel {
    config: StateModelConfig,
    store: ParamStore,
    lstm: LstmCell,
    head: Dense,
}

/// Head output split into mixture pieces: `(logits, mu, log_sigma)`.
struct MixtureNodes {
    logits: NodeId,
    mu: NodeId,
    log_sigma: NodeId,
}

enum HeadNodes {
    Point(NodeId),
    Mixture(MixtureNodes),
}

impl StateModel {
    pub fn new(config: StateModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let lstm = LstmCell::new(&mut store, "lstm", config.input_dim + N_ACTIONS, config.rnn_hidden, &mut rng)?;
        let head = Dense::new(&mut store, "head", config.rnn_hidden, config.head_outputs(), Activation::Linear, &mut rng)?;
        Ok(Self { config, store, lstm, head })
    }

    pub fn config(&self) -> &StateModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn head_layer(&self) -> &Dense {
        &self.head
    }

    pub fn empty_window(&self) -> HistoryWindow {
        HistoryWindow::new(self.config.window, self.config.input_dim)
    }

    fn check_window(&self, w: &HistoryWindow) -> Result<()> {
        if w.dim() != self.config.input_dim || w.window() != self.config.window {
            return domain(format!(
                "window of {}x{} does not match model {}x{}",
                w.window(),
                w.dim(),
                self.config.window,
                self.config.input_dim
            ));
        }
        if w.filled() == 0 {
            return domain("window holds no states");
        }
        if w.states().flatten().any(|v| !v.is_finite()) {
            return domain("window contains non-finite values");
        }
        Ok(())
    }

    fn record_head(&self, store: &ParamStore, tape: &mut Tape, w: &HistoryWindow) -> Result<HeadNodes> {
        let inputs: Vec<NodeId> = w.rows().into_iter().map(|r| tape.leaf(r)).collect();
        let h = self.lstm.unroll(tape, store, &inputs)?;
        let out = self.head.forward(tape, store, h)?;
        let d = self.config.input_dim;
        let base = if self.config.residual { Some(w.current_state()) } else { None };
        if self.config.variant.uses_mdn() {
            let k = self.config.mixtures;
            let logits = tape.slice(out, 0, k)?;
            let mut mu = tape.slice(out, k, k * d)?;
            let log_sigma = tape.slice(out, k + k * d, k * d)?;
            if let Some(b) = base {
                let tiled = tape.leaf(b.repeat(k));
                mu = tape.add(mu, tiled)?;
            }
            Ok(HeadNodes::Mixture(MixtureNodes { logits, mu, log_sigma }))
        } else {
            let point = match base {
                Some(b) => {
                    let b = tape.leaf(b);
                    tape.add(out, b)?
                }
                None => out,
            };
            Ok(HeadNodes::Point(point))
        }
    }

    /// MSE for point heads, mixture NLL for MDN heads.
    pub fn record_loss_with(&self, store: &ParamStore, tape: &mut Tape, pair: &TrainingPair) -> Result<NodeId> {
        self.check_window(&pair.window)?;
        if pair.target.len() != self.config.input_dim {
            return domain(format!("target has length {}, expected {}", pair.target.len(), self.config.input_dim));
        }
        match self.record_head(store, tape, &pair.window)? {
            HeadNodes::Point(p) => tape.mse(p, &pair.target),
            HeadNodes::Mixture(m) => tape.mdn_nll(m.logits, m.mu, m.log_sigma, &pair.target),
        }
    }

    pub fn predict(&self, w: &HistoryWindow) -> Result<Prediction> {
        self.check_window(w)?;
        let mut tape = Tape::new();
        match self.record_head(&self.store, &mut tape, w)? {
            HeadNodes::Point(p) => {
                let v = tape.value(p).to_vec();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::State("state model produced a non-finite prediction".into()));
                }
                Ok(Prediction::Point(v))
            }
            HeadNodes::Mixture(m) => {
                Ok(Prediction::Mixture(MixtureParams::from_raw(tape.value(m.logits), tape.value(m.mu), tape.value(m.log_sigma))?))
            }
        }
    }

    /// Next internal state: a tempered mixture sample, or the point prediction.
    pub fn next_state<R: Rng + ?Sized>(&self, w: &HistoryWindow, tau: f64, rng: &mut R) -> Result<(Vec<f64>, Prediction)> {
        let pred = self.predict(w)?;
        let next = match &pred {
            Prediction::Point(p) => p.clone(),
            Prediction::Mixture(m) => sample_next(m, tau, rng)?,
        };
        Ok((next, pred))
    }

    /// Mean MSE of the prediction mean, for either head.
    pub fn mean_squared_error(&self, pairs: &[TrainingPair]) -> Result<f64> {
        if pairs.is_empty() {
            return domain("no pairs to evaluate");
        }
        let mut total = 0.0;
        for p in pairs {
            let m = self.predict(&p.window)?.mean();
            total += m.iter().zip(&p.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m.len() as f64;
        }
        Ok(total / pairs.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(self.config.variant.model_kind(), serde_json::to_value(&self.config)?, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(&["state_rnn", "state_mdn"])?;
        let config: StateModelConfig = ck.hyperparams()?;
        if config.variant.model_kind() != ck.model_kind {
            return Err(Error::Checkpoint("checkpoint model_kind disagrees with its variant".into()));
        }
        let mut m = Self::new(config)?;
        ck.restore_into(&mut m.store)?;
        Ok(m)
    }
}

impl Trainable for StateModel {
    type Sample = TrainingPair;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn record_loss(&self, tape: &mut Tape, sample: &TrainingPair, _rng: &mut ChaCha8Rng) -> Result<NodeId> {
        self.record_loss_with(&self.store, tape, sample)
    }
}

/// Mean NLL of `eval` under one diagonal Gaussian fitted (ML) to `fit_on`.
pub fn global_gaussian_nll(fit_on: &[Vec<f64>], eval: &[Vec<f64>]) -> Result<f64> {
    if fit_on.is_empty() || eval.is_empty() {
        return domain("global Gaussian baseline needs data");
    }
    let d = fit_on[0].len();
    let n = fit_on.len() as f64;
    let mut mean = vec![0.0; d];
    for v in fit_on {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n);
    }
    let mut var = vec![0.0; d];
    for v in fit_on {
        var.iter_mut().zip(v.iter().zip(&mean)).for_each(|(s, (x, m))| *s += (x - m) * (x - m) / n);
    }
    let var: Vec<f64> = var.into_iter().map(|v| v.max(1e-12)).collect();
    let total: f64 = eval
        .iter()
        .map(|v| {
            v.iter().zip(mean.iter().zip(&var)).map(|(x, (m, s2))| 0.5 * (x - m) * (x - m) / s2 + 0.5 * s2.ln() + HALF_LN_2PI).sum::<f64>()
        })
        .sum();
    Ok(total / eval.len() as f64)
}

/// Builds windows from `train`/`val`, trains with early stopping, and records
/// the encoder's checkpoint hash in the config.
pub fn train_state_model(
    mut config: StateModelConfig,
    train: &Cohort,
    val: &Cohort,
    encoder: Option<&Autoencoder>,
    schedule: &TrainSchedule,
    optimizer: OptimizerConfig,
) -> Result<(StateModel, FitHistory)> {
    match (config.variant.encoder_kind(), encoder) {
        (Some(kind), Some(e)) => {
            if e.kind() != kind {
                return Err(Error::Config(format!("variant {} needs a {:?} encoder", config.variant, kind)));
            }
            config.input_dim = e.latent_dim();
            config.encoder_hash = Some(e.to_checkpoint()?.content_hash()?);
        }
        (Some(_), None) => return Err(Error::Config(format!("variant {} needs an encoder checkpoint", config.variant))),
        (None, Some(_)) => return Err(Error::Config(format!("variant {} takes raw states", config.variant))),
        (None, None) => config.input_dim = N_FEATURES,
    }
    let train_pairs = build_training_sequences(train, encoder, config.window)?;
    if train_pairs.is_empty() {
        return domain("training cohort has no transitions");
    }
    let val_pairs = if val.is_empty() { Vec::new() } else { build_training_sequences(val, encoder, config.window)? };
    let mut model = StateModel::new(config)?;
    let history = fit(&mut model, &train_pairs, &val_pairs, schedule, optimizer)?;
    Ok((model, history))
}
