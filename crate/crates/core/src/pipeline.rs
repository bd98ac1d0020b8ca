//! Stage runner behind the command-line tool. Every stage reads the run
//! configuration, writes its artifacts into one output directory and merges
//! its numbers into `metrics.json` and its provenance into `manifest.json`.
//!
//! Layout of the output directory:
//!
//! ```text
//! cohort.csv                  synth-data
//! checkpoints/{vae,ae}.json   train-vae
//! checkpoints/state_*.json    train-state (one per variant)
//! checkpoints/heads_*.json    train-heads (one pair per representation)
//! rollouts_*.csv              rollout
//! checkpoints/qnet.json       train-agent, plus reward_curve.csv
//! trajectories.csv, ntm.csv, histograms.csv   eval / ntm
//! metrics.json, manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::{policy_histogram, train_agent, write_reward_curve, DqnConfig, QNetwork};
use crate::data::{export_cohort, load_cohort, split_cohort, Cohort, CohortSchema, PatientEpisode, N_FEATURES};
use crate::env::{
    replay_physician, write_sim_trajectories, RewardFormulation, RewardSpec, SimConfig, SimTrajectory, TerminationMode, WorldModel,
    WorldModelEnv,
};
use crate::error::{Error, Result};
use crate::eval::{
    aligned_matrices, compare_policy_distributions, normalized_trajectory_mean, physician_stats, teacher_forced_eval, write_tidy,
    NtmNormalization, NtmReport, TidyRow,
};
use crate::heads::{accuracy, build_head_samples, roc_auc, train_heads, BinaryHead, HeadKind, HeadsTrainingConfig};
use crate::learner::{sha256_hex, Checkpoint, FitHistory, OptimizerConfig, TrainSchedule};
use crate::state_model::{train_state_model, StateModel, StateModelConfig, Variant};
use crate::synth::{generate_synthetic_cohort, SyntheticDynamicsSpec};
use crate::vae::{train_autoencoder, Autoencoder, AutoencoderConfig, AutoencoderKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticPreset {
    Sepsis,
    Separable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Episode CSV to use instead of the synthetic cohort written by `synth-data`.
    pub cohort_path: Option<PathBuf>,
    pub synthetic_episodes: usize,
    pub preset: SyntheticPreset,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { cohort_path: None, synthetic_episodes: 200, preset: SyntheticPreset::Sepsis, val_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { max_epochs: 20, patience: 3, batch_size: 32, learning_rate: 1e-3, clip_norm: Some(5.0) }
    }
}

impl TrainingConfig {
    fn schedule(&self, seed: u64) -> TrainSchedule {
        TrainSchedule { max_epochs: self.max_epochs, patience: self.patience, batch_size: self.batch_size, seed }
    }

    fn optimizer(&self) -> OptimizerConfig {
        let opt = OptimizerConfig::adam(self.learning_rate);
        match self.clip_norm {
            Some(c) => opt.with_clip_norm(c),
            None => opt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderStageConfig {
    pub kl_weight: f64,
    pub training: TrainingConfig,
}

impl Default for EncoderStageConfig {
    fn default() -> Self {
        Self { kl_weight: 0.0, training: TrainingConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateStageConfig {
    pub variants: Vec<Variant>,
    pub window: usize,
    pub rnn_hidden: usize,
    pub mixtures: usize,
    pub residual: bool,
    pub training: TrainingConfig,
}

impl Default for StateStageConfig {
    fn default() -> Self {
        let base = StateModelConfig::new(Variant::Rnn);
        Self {
            variants: Variant::ALL.to_vec(),
            window: base.window,
            rnn_hidden: base.rnn_hidden,
            mixtures: crate::state_model::DEFAULT_MIXTURES,
            residual: base.residual,
            training: TrainingConfig { max_epochs: 10, ..TrainingConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsStageConfig {
    pub hidden: Vec<usize>,
    pub max_length: usize,
    pub training: TrainingConfig,
}

impl Default for HeadsStageConfig {
    fn default() -> Self {
        let h = HeadsTrainingConfig::default();
        Self { hidden: h.hidden, max_length: h.max_length, training: TrainingConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimStageConfig {
    pub temperature: f64,
    pub max_steps: usize,
    pub termination_mode: TerminationMode,
    pub reward: RewardFormulation,
}

impl Default for SimStageConfig {
    fn default() -> Self {
        Self { temperature: 1.0, max_steps: 50, termination_mode: TerminationMode::Bernoulli, reward: RewardFormulation::TerminalOnly }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentStageConfig {
    /// Simulator the agent is trained and evaluated in.
    pub variant: Variant,
    /// `dqn.seed` is ignored; the run seed is used instead.
    pub dqn: DqnConfig,
}

impl Default for AgentStageConfig {
    fn default() -> Self {
        Self {
            variant: Variant::VaeMdnRnn,
            dqn: DqnConfig { total_steps: 20_000, epsilon_decay_steps: 10_000, train_every: 4, ..DqnConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStageConfig {
    /// Greedy agent episodes for the policy histograms.
    pub policy_episodes: usize,
    pub histogram_bins: usize,
    /// Held-out episodes written to trajectories.csv per variant and mode.
    pub export_episodes: usize,
    pub ntm_normalization: NtmNormalization,
}

impl Default for EvalStageConfig {
    fn default() -> Self {
        Self { policy_episodes: 200, histogram_bins: 20, export_episodes: 10, ntm_normalization: NtmNormalization::SumOfSquares }
    }
}

/// Everything a run needs; every field has a default so a config file only
/// lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub vae: EncoderStageConfig,
    pub state: StateStageConfig,
    pub heads: HeadsStageConfig,
    pub sim: SimStageConfig,
    pub agent: AgentStageConfig,
    pub eval: EvalStageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            vae: EncoderStageConfig::default(),
            state: StateStageConfig::default(),
            heads: HeadsStageConfig::default(),
            sim: SimStageConfig::default(),
            agent: AgentStageConfig::default(),
            eval: EvalStageConfig::default(),
        }
    }
}

impl RunConfig {
    /// Default configuration on a synthetic cohort of `episodes` stays.
    pub fn smoke(episodes: usize, seed: u64) -> Self {
        let mut c = Self { seed, ..Self::default() };
        c.data.synthetic_episodes = episodes;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Sets a dotted key (`agent.dqn.total_steps`) to a JSON value; bare words
    /// are taken as strings.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot =
                slot.as_object_mut().and_then(|o| o.get_mut(part)).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let c: Self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if let Some(p) = &self.data.cohort_path {
            if !p.is_file() {
                return cfg(format!("cohort file {} does not exist", p.display()));
            }
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return cfg(format!("data.val_fraction must be in (0, 1), got {}", self.data.val_fraction));
        }
        if self.data.cohort_path.is_none() && self.data.synthetic_episodes < 2 {
            return cfg("data.synthetic_episodes must be >= 2".into());
        }
        if self.state.variants.is_empty() {
            return cfg("state.variants is empty".into());
        }
        for t in [&self.vae.training, &self.state.training, &self.heads.training] {
            t.schedule(0).validate().map_err(|e| Error::Config(e.to_string()))?;
            if !(t.learning_rate > 0.0) {
                return cfg(format!("learning_rate must be positive, got {}", t.learning_rate));
            }
        }
        if !(self.vae.kl_weight >= 0.0) {
            return cfg(format!("vae.kl_weight must be >= 0, got {}", self.vae.kl_weight));
        }
        StateModelConfig {
            window: self.state.window,
            rnn_hidden: self.state.rnn_hidden,
            mixtures: self.state.mixtures,
            ..StateModelConfig::new(Variant::MdnRnn)
        }
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
        self.sim_config(self.agent.variant, 0).validate()?;
        self.agent.dqn.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.eval.policy_episodes == 0 || self.eval.histogram_bins == 0 {
            return cfg("eval.policy_episodes and eval.histogram_bins must be >= 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    fn sim_config(&self, variant: Variant, seed: u64) -> SimConfig {
        SimConfig {
            variant,
            temperature: self.sim.temperature,
            reward: RewardSpec::for_formulation(self.sim.reward),
            max_steps: self.sim.max_steps,
            termination_mode: self.sim.termination_mode,
            seed,
        }
    }

    fn sub_seed(&self, tag: u64) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9))
    }

    fn needs_encoder(&self, kind: AutoencoderKind) -> bool {
        self.state.variants.iter().chain([&self.agent.variant]).any(|v| v.encoder_kind() == Some(kind))
    }

    fn representations(&self) -> Vec<Option<AutoencoderKind>> {
        let mut reps = Vec::new();
        for v in self.state.variants.iter().chain([&self.agent.variant]) {
            if !reps.contains(&v.encoder_kind()) {
                reps.push(v.encoder_kind());
            }
        }
        reps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    SynthData,
    TrainVae,
    TrainState,
    TrainHeads,
    Rollout,
    TrainAgent,
    Eval,
    Ntm,
}

impl Stage {
    /// The end-to-end order used by [`run_all`].
    pub const PIPELINE: [Stage; 7] =
        [Stage::SynthData, Stage::TrainVae, Stage::TrainState, Stage::TrainHeads, Stage::Rollout, Stage::TrainAgent, Stage::Eval];

    pub fn parse(s: &str) -> Option<Self> {
        [Stage::PIPELINE.as_slice(), &[Stage::Ntm]].concat().into_iter().find(|st| st.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthData => "synth-data",
            Stage::TrainVae => "train-vae",
            Stage::TrainState => "train-state",
            Stage::TrainHeads => "train-heads",
            Stage::Rollout => "rollout",
            Stage::TrainAgent => "train-agent",
            Stage::Eval => "eval",
            Stage::Ntm => "ntm",
        }
    }
}

/// What a stage produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StageReport {
    pub metrics: BTreeMap<String, f64>,
    /// Checkpoint file name -> content hash.
    pub checkpoints: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl StageReport {
    fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    fn fit(&mut self, prefix: &str, h: &FitHistory) {
        self.metric(format!("{prefix}.epochs"), h.epochs.len() as f64);
        self.metric(format!("{prefix}.best_val"), h.best_val_metric);
        if let Some(last) = h.epochs.last() {
            self.metric(format!("{prefix}.train_loss"), last.train_loss);
        }
    }

    fn save_checkpoint(&mut self, out: &Path, name: &str, ck: &Checkpoint) -> Result<()> {
        fs::create_dir_all(out.join("checkpoints"))?;
        ck.save(checkpoint_path(out, name))?;
        self.checkpoints.insert(format!("{name}.json"), ck.content_hash()?);
        Ok(())
    }
}

/// File-name form of a variant label.
pub fn variant_slug(v: Variant) -> String {
    v.label().to_lowercase().replace('+', "_")
}

fn rep_slug(rep: Option<AutoencoderKind>) -> &'static str {
    match rep {
        None => "raw",
        Some(k) => k.model_kind(),
    }
}

fn checkpoint_path(out: &Path, name: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{name}.json"))
}

fn load_checkpoint(out: &Path, name: &str, producer: Stage) -> Result<Checkpoint> {
    let p = checkpoint_path(out, name);
    if !p.is_file() {
        return Err(Error::State(format!("missing {}; run `{}` first", p.display(), producer.name())));
    }
    Checkpoint::load(p)
}

fn cohort_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.data.cohort_path.clone().unwrap_or_else(|| out.join("cohort.csv"))
}

fn load_split(cfg: &RunConfig, out: &Path) -> Result<(Cohort, Cohort)> {
    let p = cohort_path(cfg, out);
    if !p.is_file() {
        return Err(Error::State(format!("missing {}; run `synth-data` first", p.display())));
    }
    let cohort = load_cohort(&p, &CohortSchema::default())?;
    split_cohort(&cohort, 1.0 - cfg.data.val_fraction, cfg.sub_seed(1))
}

fn load_encoder(out: &Path, kind: Option<AutoencoderKind>) -> Result<Option<Autoencoder>> {
    kind.map(|k| Autoencoder::from_checkpoint(&load_checkpoint(out, k.model_kind(), Stage::TrainVae)?)).transpose()
}

fn load_world_model(out: &Path, variant: Variant, train: &Cohort) -> Result<WorldModel> {
    let rep = rep_slug(variant.encoder_kind());
    let state = StateModel::from_checkpoint(&load_checkpoint(out, &format!("state_{}", variant_slug(variant)), Stage::TrainState)?)?;
    let term = BinaryHead::from_checkpoint(&load_checkpoint(out, &format!("heads_{rep}_termination"), Stage::TrainHeads)?)?;
    let outc = BinaryHead::from_checkpoint(&load_checkpoint(out, &format!("heads_{rep}_outcome"), Stage::TrainHeads)?)?;
    let enc = load_encoder(out, variant.encoder_kind())?;
    if let (Some(e), Some(h)) = (&enc, &state.config().encoder_hash) {
        if &e.to_checkpoint()?.content_hash()? != h {
            return Err(Error::State(format!("{variant} state model was trained against a different encoder")));
        }
    }
    WorldModel::new(state, term, outc, enc, train.stats.clone())
}

/// Simulator for `variant` rebuilt from a finished run's checkpoints. Episodes
/// start from the training split's initial states.
pub fn open_simulator(cfg: &RunConfig, out: &Path, variant: Variant, seed: u64) -> Result<WorldModelEnv> {
    let (train, _) = load_split(cfg, out)?;
    let model = load_world_model(out, variant, &train)?;
    WorldModelEnv::new(model, cfg.sim_config(variant, seed), train.initial_states())
}

fn states_of(c: &Cohort) -> Vec<Vec<f64>> {
    c.episodes.iter().flat_map(|e| e.states.iter().map(|s| s.to_vec())).collect()
}

fn stage_synth(cfg: &RunConfig, out: &Path, rep: &mut StageReport) -> Result<()> {
    let spec = match cfg.data.preset {
        SyntheticPreset::Sepsis => SyntheticDynamicsSpec::sepsis_default(cfg.sub_seed(0)),
        SyntheticPreset::Separable => SyntheticDynamicsSpec::separable(cfg.sub_seed(0)),
    };
    let cohort = generate_synthetic_cohort(&spec, cfg.data.synthetic_episodes)?;
    let path = out.join("cohort.csv");
    export_cohort(&cohort, &path)?;
    fs::write(out.join("synthetic_spec.json"), serde_json::to_string_pretty(&spec)?)?;
    rep.outputs.extend(["cohort.csv".to_string(), "synthetic_spec.json".to_string()]);
    rep.metric("synth.episodes", cohort.len() as f64);
    rep.metric("synth.states", cohort.n_states() as f64);
    rep.metric("synth.death_rate", cohort.death_rate());
    Ok(())
}

fn stage_vae(cfg: &RunConfig, out: &Path, rep: &mut StageReport) -> Result<()> {
    let (train, val) = load_split(cfg, out)?;
    let (tr, va) = (states_of(&train), states_of(&val));
    for (i, kind) in [AutoencoderKind::Vae, AutoencoderKind::Ae].into_iter().enumerate() {
        if !cfg.needs_encoder(kind) {
            continue;
        }
        let base = match kind {
            AutoencoderKind::Vae => AutoencoderConfig { kl_weight: cfg.vae.kl_weight, ..AutoencoderConfig::vae() },
            AutoencoderKind::Ae => AutoencoderConfig::ae(),
        };
        let seed = cfg.sub_seed(10 + i as u64);
        let (model, hist) =
            train_autoencoder(base.with_seed(seed), &tr, &va, &cfg.vae.training.schedule(seed), cfg.vae.training.optimizer())?;
        let name = kind.model_kind();
        rep.fit(name, &hist);
        rep.metric(format!("{name}.val_mse"), model.reconstruction_mse(&va)?);
        rep.save_checkpoint(out, name, &model.to_checkpoint()?)?;
    }
    Ok(())
}

fn stage_state(cfg: &RunConfig, out: &Path, rep: &mut StageReport) -> Result<()> {
    let (train, val) = load_split(cfg, out)?;
    for (i, &variant) in cfg.state.variants.iter().enumerate() {
        let enc = load_encoder(out, variant.encoder_kind())?;
        let seed = cfg.sub_seed(20 + i as u64);
        let config = StateModelConfig {
            window: cfg.state.window,
            rnn_hidden: cfg.state.rnn_hidden,
            mixtures: if variant.uses_mdn() { cfg.state.mixtures } else { 1 },
            residual: cfg.state.residual,
            init_seed: seed,
            ..StateModelConfig::new(variant)
        };
        log::info!("training {variant} state model");
        let (model, hist) =
            train_state_model(config, &train, &val, enc.as_ref(), &cfg.state.training.schedule(seed), cfg.state.training.optimizer())?;
        let slug = variant_slug(variant);
        rep.fit(&format!("state.{}", variant.label()), &hist);
        rep.save_checkpoint(out, &format!("state_{slug}"), &model.to_checkpoint()?)?;
    }
    Ok(())
}

fn stage_heads(cfg: &RunConfig, out: &Path, rep: &mut StageReport) -> Result<()> {
    let (train, val) = load_split(cfg, out)?;
    for (i, kind) in cfg.representations().into_iter().enumerate() {
        let enc = load_encoder(out, kind)?;
        let seed = cfg.sub_seed(30 + i as u64);
        let hc = HeadsTrainingConfig { hidden: cfg.heads.hidden.clone(), max_length: cfg.heads.max_length, init_seed: seed };
        let heads = train_heads(&train, &val, enc.as_ref(), &hc, &cfg.heads.training.schedule(seed), cfg.heads.training.optimizer())?;
        let slug = rep_slug(kind);
        for (head, hist, hk) in [
            (&heads.termination, &heads.termination_history, HeadKind::Termination),
            (&heads.outcome, &heads.outcome_history, HeadKind::Outcome),
        ] {
            let prefix = format!("heads.{slug}.{}", hk.model_kind());
            rep.fit(&prefix, hist);
            let samples = build_head_samples(&val, enc.as_ref(), hk, cfg.heads.max_length)?;
            let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
            let probs = head.predict_samples(&samples)?;
            rep.metric(format!("{prefix}.val_accuracy"), accuracy(&probs, &labels));
            if let Ok(auc) = roc_auc(&probs, &labels) {
                rep.metric(format!("{prefix}.val_auc"), auc);
            }
            rep.save_checkpoint(out, &format!("heads_{slug}_{}", hk.model_kind()), &head.to_checkpoint()?)?;
        }
    }
    Ok(())
}

/// Closed-loop replays of every held-out episode under the recorded actions.
fn replay_all(cfg: &RunConfig, model: WorldModel, val: &Cohort, tag: u64) -> Result<Vec<SimTrajectory>> {
    let variant = model.variant();
    let mut env = WorldModelEnv::new(model, cfg.sim_config(variant, cfg.sub_seed(tag)), val.initial_states())?;
    val.episodes.iter().map(|ep| replay_physician(&mut env, ep)).collect()
}

fn stage_rollout(cfg: &RunConfig, out: &Path, rep: &mut StageReport) -> Result<()> {
    let (train, val) = load_split(cfg, out)?;
    for (i, &variant) in cfg.state.variants.iter().enumerate() {
        let model = load_world_model(out, variant, &train)?;
        let trajs = replay_all(cfg, model, &val, 40 + i as u64)?;
        let named: Vec<(String, SimTrajectory)> = val.episodes.iter().map(|e| e.subject_id.clone()).zip(trajs.iter().cloned()).collect();
        let file = format!("rollouts_{}.csv", variant_slug(variant));
        write_sim_trajectories(&named, &train.stats, BufWriter::new(fs::File::create(out.join(&file))?))?;
        rep.outputs.push(file);
        let n = trajs.len() as f64;
        let prefix = format!("rollout.{}", variant.label());
        rep.metric(format!("{prefix}.mean_length"), trajs.iter().map(|t| t.len() as f64).sum::<f64>() / n);
        rep.metric(format!("{prefix}.mean_return"), trajs.iter().map(|t| t.total_return()).sum::<f64>() / n);
        let deaths = trajs.iter().filter(|t| t.outcome == Some(crate::data::Outcome::Death)).count();
        rep.metric(format!("{prefix}.death_rate"), deaths as f64 / n);
    }
    Ok(())
}

fn agent_env(cfg: &RunConfig, out: &Path, train: &Cohort, tag: u64) -> Result<WorldModelEnv> {
    let model = load_world_model(out, cfg.agent.variant, train)?;
    WorldModelEnv::new(model, cfg.sim_config(cfg.agent.variant, cfg.sub_seed(tag)), train.initial_states())
}

fn stage_agent(cfg: &RunConfig, out: &Path, rep: &mut StageReport) -> Result<()> {
    let (train, _) = load_split(cfg, out)?;
    let mut env = agent_env(cfg, out, &train, 50)?;
    let dqn = DqnConfig { seed: cfg.sub_seed(51), ..cfg.agent.dqn.clone() };
    let trained = train_agent(&mut env, &dqn)?;
    write_reward_curve(&trained.curve, BufWriter::new(fs::File::create(out.join("reward_curve.csv"))?))?;
    rep.outputs.push("reward_curve.csv".into());
    rep.metric("agent.episodes", trained.curve.len() as f64);
    let tail = &trained.curve[trained.curve.len().saturating_sub(100)..];
    if !tail.is_empty() {
        rep.metric("agent.mean_return_last100", tail.iter().map(|r| r.total_return).sum::<f64>() / tail.len() as f64);
    }
    rep.save_checkpoint(out, "qnet", &trained.policy.to_checkpoint()?)?;
    Ok(())
}

fn ntm_rows(variant: Variant, mode: &str, report: &NtmReport, names: &[String]) -> Vec<NtmRow> {
    report
        .features
        .iter()
        .map(|f| NtmRow {
            variant: variant.label().to_string(),
            mode: mode.to_string(),
            feature: names[f.feature].clone(),
            ntm_real: f.real,
            ntm_sim: f.sim,
            gap: f.gap,
            degenerate: f.degenerate,
        })
        .collect()
}

#[derive(Serialize)]
struct NtmRow {
    variant: String,
    mode: String,
    feature: String,
    ntm_real: f64,
    ntm_sim: f64,
    gap: f64,
    degenerate: bool,
}

fn tidy_rows(
    variant: Variant,
    mode: &str,
    episode: &str,
    names: &[String],
    real: &[Vec<f64>],
    sim: &[Vec<f64>],
    t0: usize,
) -> Vec<TidyRow> {
    let mut rows = Vec::new();
    for t in 0..real.len().max(sim.len()) {
        for (f, name) in names.iter().enumerate() {
            rows.push(TidyRow {
                variant: variant.label().to_string(),
                mode: mode.to_string(),
                episode: episode.to_string(),
                feature: name.clone(),
                t: t + t0,
                real: real.get(t).map(|r| r[f]),
                sim: sim.get(t).map(|s| s[f]),
            });
        }
    }
    rows
}

fn raw_states(ep: &PatientEpisode) -> Vec<Vec<f64>> {
    ep.raw_states.iter().map(|s| s.to_vec()).collect()
}

/// Teacher-forced and closed-loop comparison of every variant on the held-out
/// split, in de-normalized units. With `full` the trajectory export and
/// policy histograms are produced as well.
fn stage_eval(cfg: &RunConfig, out: &Path, rep: &mut StageReport, full: bool) -> Result<()> {
    let (train, val) = load_split(cfg, out)?;
    let names = train.stats.feature_names.clone();
    let stats = &train.stats;
    let mut tidy = Vec::new();
    let mut ntm = Vec::new();
    for (i, &variant) in cfg.state.variants.iter().enumerate() {
        let model = load_world_model(out, variant, &train)?;
        let label = variant.label();

        let enc = model.encoder.as_deref();
        let tf = teacher_forced_eval(&model.state_model, &val, enc, cfg.sim.temperature, cfg.sub_seed(60 + i as u64))?;
        rep.metric(format!("eval.{label}.teacher_forced.mse"), tf.mse);
        if let Some(s) = tf.sample_mse {
            rep.metric(format!("eval.{label}.teacher_forced.sample_mse"), s);
        }
        let tf_real: Vec<Vec<Vec<f64>>> = tf.series.iter().map(|s| s.real.iter().map(|r| stats.denormalize(r)).collect()).collect();
        let tf_sim: Vec<Vec<Vec<f64>>> = tf.series.iter().map(|s| s.predicted.iter().map(|r| stats.denormalize(r)).collect()).collect();
        let (rm, sm) = aligned_matrices(&tf_real, &tf_sim, N_FEATURES)?;
        let tf_ntm = normalized_trajectory_mean(&rm, &sm, cfg.eval.ntm_normalization)?;
        rep.metric(format!("eval.{label}.teacher_forced.ntm_mean_gap"), tf_ntm.mean_gap);
        ntm.extend(ntm_rows(variant, "teacher_forced", &tf_ntm, &names));

        let trajs = replay_all(cfg, model, &val, 40 + i as u64)?;
        let real: Vec<Vec<Vec<f64>>> = val.episodes.iter().map(raw_states).collect();
        let sim: Vec<Vec<Vec<f64>>> = trajs.iter().map(|t| t.observations.iter().map(|o| stats.denormalize(o)).collect()).collect();
        let (rm, sm) = aligned_matrices(&real, &sim, N_FEATURES)?;
        let cl_ntm = normalized_trajectory_mean(&rm, &sm, cfg.eval.ntm_normalization)?;
        rep.metric(format!("eval.{label}.closed_loop.ntm_mean_gap"), cl_ntm.mean_gap);
        rep.metric(format!("eval.{label}.closed_loop.mean_length"), trajs.iter().map(|t| t.len() as f64).sum::<f64>() / trajs.len() as f64);
        ntm.extend(ntm_rows(variant, "closed_loop", &cl_ntm, &names));

        if full {
            for (k, ep) in val.episodes.iter().take(cfg.eval.export_episodes).enumerate() {
                tidy.extend(tidy_rows(variant, "teacher_forced", &ep.subject_id, &names, &tf_real[k], &tf_sim[k], 1));
                tidy.extend(tidy_rows(variant, "closed_loop", &ep.subject_id, &names, &real[k], &sim[k], 0));
            }
        }
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(out.join("ntm.csv"))?));
    for r in &ntm {
        w.serialize(r)?;
    }
    w.flush()?;
    rep.outputs.push("ntm.csv".into());
    if !full {
        return Ok(());
    }
    write_tidy(&tidy, BufWriter::new(fs::File::create(out.join("trajectories.csv"))?))?;
    rep.outputs.push("trajectories.csv".into());

    let policy = QNetwork::from_checkpoint(&load_checkpoint(out, "qnet", Stage::TrainAgent)?)?;
    let mut env = agent_env(cfg, out, &train, 70)?;
    let agent = policy_histogram(&policy, &mut env, cfg.eval.policy_episodes, cfg.sim.max_steps)?;
    let physician = physician_stats(&val, &RewardSpec::for_formulation(cfg.sim.reward))?;
    let cmp = compare_policy_distributions(&physician, &agent, cfg.eval.histogram_bins)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(out.join("histograms.csv"))?));
    for r in &cmp.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    rep.outputs.push("histograms.csv".into());
    let mean_len = |l: &[usize]| l.iter().sum::<usize>() as f64 / l.len() as f64;
    rep.metric("eval.policy.agent.mean_return", agent.mean_return());
    rep.metric("eval.policy.agent.mean_length", mean_len(&agent.lengths));
    rep.metric("eval.policy.physician.mean_return", physician.mean_return());
    rep.metric("eval.policy.physician.mean_length", mean_len(&physician.lengths));
    rep.metric("eval.policy.agent.dominant_action", cmp.dominant_action as f64);
    rep.metric("eval.policy.agent.dominant_share", cmp.dominant_share);
    rep.metric("eval.policy.agent.policy_collapse", if cmp.policy_collapse { 1.0 } else { 0.0 });
    if cmp.policy_collapse {
        log::warn!("agent policy collapsed onto action {} ({:.0}%)", cmp.dominant_action, 100.0 * cmp.dominant_share);
    }
    Ok(())
}

fn merge_json(path: &Path, update: impl FnOnce(&mut serde_json::Map<String, Value>)) -> Result<()> {
    let mut doc = match fs::read_to_string(path) {
        Ok(text) => match serde_json::from_str::<Value>(&text)? {
            Value::Object(m) => m,
            _ => return Err(Error::State(format!("{} is not a JSON object", path.display()))),
        },
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => serde_json::Map::new(),
        Err(e) => return Err(e.into()),
    };
    update(&mut doc);
    // Keys sorted so reruns write identical bytes.
    let sorted: BTreeMap<String, Value> = doc.into_iter().collect();
    fs::write(path, serde_json::to_string_pretty(&sorted)? + "\n")?;
    Ok(())
}

/// Runs one stage and records its outputs in `metrics.json` and `manifest.json`.
pub fn run_stage(stage: Stage, cfg: &RunConfig, out: &Path) -> Result<StageReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut rep = StageReport::default();
    log::info!("stage {}", stage.name());
    match stage {
        Stage::SynthData => stage_synth(cfg, out, &mut rep)?,
        Stage::TrainVae => stage_vae(cfg, out, &mut rep)?,
        Stage::TrainState => stage_state(cfg, out, &mut rep)?,
        Stage::TrainHeads => stage_heads(cfg, out, &mut rep)?,
        Stage::Rollout => stage_rollout(cfg, out, &mut rep)?,
        Stage::TrainAgent => stage_agent(cfg, out, &mut rep)?,
        Stage::Eval => stage_eval(cfg, out, &mut rep, true)?,
        Stage::Ntm => stage_eval(cfg, out, &mut rep, false)?,
    }
    if let Some((k, v)) = rep.metrics.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::State(format!("metric {k} is not finite ({v})")));
    }
    merge_json(&out.join("metrics.json"), |m| {
        for (k, v) in &rep.metrics {
            m.insert(k.clone(), json!(v));
        }
    })?;
    let hash = cfg.hash()?;
    merge_json(&out.join("manifest.json"), |m| {
        m.insert("config_hash".into(), json!(hash));
        m.insert("seed".into(), json!(cfg.seed));
        let stages = m.entry("stages").or_insert_with(|| json!({}));
        if let Value::Object(s) = stages {
            s.insert(
                stage.name().into(),
                json!({
                    "config_hash": hash,
                    "seed": cfg.seed,
                    "checkpoints": rep.checkpoints,
                    "outputs": rep.outputs,
                    "metrics": rep.metrics,
                }),
            );
        }
    })?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(rep)
}

/// Runs synth-data through eval in order.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<()> {
    for stage in Stage::PIPELINE {
        run_stage(stage, cfg, out)?;
    }
    Ok(())
}
