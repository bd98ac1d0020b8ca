//! Evaluation: teacher-forced one-step prediction, trajectory matrices and
//! the normalized trajectory mean, and physician-vs-agent histograms.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::PolicyStats;
use crate::data::{Cohort, PatientEpisode, N_ACTIONS};
use crate::env::{shaped_reward, RewardFormulation, RewardSpec};
use crate::error::{domain, Result};
use crate::state_model::{episode_inputs, sample_next, HistoryWindow, Prediction, StateModel};
use crate::vae::Autoencoder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSeries {
    pub subject_id: String,
    /// Normalized next-state predictions, one per transition.
    pub predicted: Vec<Vec<f64>>,
    pub real: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcedReport {
    pub per_feature_mse: Vec<f64>,
    pub mse: f64,
    /// MSE of single tempered samples (mixture heads only).
    pub sample_mse: Option<f64>,
    pub series: Vec<EpisodeSeries>,
}

fn mse_per_feature(series: &[EpisodeSeries], pick: impl Fn(&EpisodeSeries) -> &Vec<Vec<f64>>) -> Vec<f64> {
    let d = series.iter().flat_map(|s| s.real.first()).map(|r| r.len()).next().unwrap_or(0);
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for s in series {
        for (p, r) in pick(s).iter().zip(&s.real) {
            for (a, (x, y)) in acc.iter_mut().zip(p.iter().zip(r)) {
                *a += (x - y) * (x - y);
            }
            n += 1;
        }
    }
    acc.iter().map(|a| a / n.max(1) as f64).collect()
}

/// One-step predictions from true histories. `predictor` maps a window over
/// the episode's (possibly encoded) states to a normalized 46-feature prediction.
pub fn teacher_forced_series<F>(
    cohort: &Cohort,
    encoder: Option<&Autoencoder>,
    window: usize,
    mut predictor: F,
) -> Result<Vec<EpisodeSeries>>
where
    F: FnMut(&HistoryWindow) -> Result<Vec<f64>>,
{
    if cohort.is_empty() {
        return domain("cohort has no episodes");
    }
    let mut out = Vec::with_capacity(cohort.len());
    for ep in &cohort.episodes {
        let inputs = episode_inputs(&ep.states, encoder)?;
        let mut s = EpisodeSeries { subject_id: ep.subject_id.clone(), predicted: Vec::new(), real: Vec::new() };
        for t in 0..ep.n_transitions() {
            let w = HistoryWindow::ending_at(&inputs, &ep.actions, t, window)?;
            s.predicted.push(predictor(&w)?);
            s.real.push(ep.states[t + 1].to_vec());
        }
        out.push(s);
    }
    Ok(out)
}

/// Teacher-forced evaluation in normalized feature space. Mixture heads are
/// scored at the mixture mean and, separately, on one tempered sample.
pub fn teacher_forced_eval(
    model: &StateModel,
    cohort: &Cohort,
    encoder: Option<&Autoencoder>,
    temperature: f64,
    seed: u64,
) -> Result<TeacherForcedReport> {
    let to_obs = |v: Vec<f64>| -> Result<Vec<f64>> {
        match encoder {
            Some(e) => e.decode_raw(&v),
            None => Ok(v),
        }
    };
    let window = model.config().window;
    let mut samples: Vec<Vec<f64>> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = teacher_forced_series(cohort, encoder, window, |w| {
        let pred = model.predict(w)?;
        if let Prediction::Mixture(m) = &pred {
            samples.push(to_obs(sample_next(m, temperature, &mut rng)?)?);
        }
        to_obs(pred.mean())
    })?;
    let per_feature_mse = mse_per_feature(&series, |s| &s.predicted);
    let mse = per_feature_mse.iter().sum::<f64>() / per_feature_mse.len().max(1) as f64;
    let sample_mse = if samples.is_empty() {
        None
    } else {
        let mut it = samples.into_iter();
        let sampled: Vec<EpisodeSeries> = series
            .iter()
            .map(|s| EpisodeSeries {
                subject_id: s.subject_id.clone(),
                predicted: (0..s.real.len()).map(|_| it.next().expect("one sample per step")).collect(),
                real: s.real.clone(),
            })
            .collect();
        let pf = mse_per_feature(&sampled, |s| &s.predicted);
        Some(pf.iter().sum::<f64>() / pf.len().max(1) as f64)
    };
    Ok(TeacherForcedReport { per_feature_mse, mse, sample_mse, series })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Real,
    Simulated,
}

/// `[rollout][t][feature]` values zero-imputed to a common length; `mask`
/// marks observed entries.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMatrix {
    pub source: Source,
    pub values: Vec<Vec<Vec<f64>>>,
    pub mask: Vec<Vec<bool>>,
    pub n_features: usize,
}

impl TrajectoryMatrix {
    pub fn from_sequences(seqs: &[Vec<Vec<f64>>], length: usize, n_features: usize, source: Source) -> Result<Self> {
        let mut values = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.len() > length {
                return domain(format!("sequence of length {} exceeds the common length {length}", s.len()));
            }
            if s.iter().any(|r| r.len() != n_features) {
                return domain(format!("rows must have {n_features} features"));
            }
            let mut v = s.clone();
            v.resize(length, vec![0.0; n_features]);
            values.push(v);
            mask.push((0..length).map(|t| t < s.len()).collect());
        }
        Ok(Self { source, values, mask, n_features })
    }

    pub fn length(&self) -> usize {
        self.values.first().map(|v| v.len()).unwrap_or(0)
    }

    /// Mean of feature `f` over every rollout and timestep, imputed zeros included.
    pub fn feature_mean(&self, f: usize) -> f64 {
        let n = (self.values.len() * self.length()) as f64;
        self.values.iter().flatten().map(|r| r[f]).sum::<f64>() / n
    }

    /// Sum of squares of feature `f` over observed entries.
    pub fn observed_sum_squares(&self, f: usize) -> f64 {
        self.values.iter().zip(&self.mask).flat_map(|(v, m)| v.iter().zip(m).filter(|(_, o)| **o).map(|(r, _)| r[f] * r[f])).sum()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().flatten().filter(|m| **m).count()
    }
}

/// Pairs real and simulated sequences, zero-imputing both to their joint maximum length.
pub fn aligned_matrices(real: &[Vec<Vec<f64>>], sim: &[Vec<Vec<f64>>], n_features: usize) -> Result<(TrajectoryMatrix, TrajectoryMatrix)> {
    let t = real.iter().chain(sim).map(|s| s.len()).max().unwrap_or(0);
    Ok((
        TrajectoryMatrix::from_sequences(real, t, n_features, Source::Real)?,
        TrajectoryMatrix::from_sequences(sim, t, n_features, Source::Simulated)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NtmNormalization {
    /// Divide by the real data's sum of squares.
    #[default]
    SumOfSquares,
    /// Divide by the real data's root mean square.
    RootMeanSquare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtmFeature {
    pub feature: usize,
    pub real: f64,
    pub sim: f64,
    pub gap: f64,
    /// Real feature is identically zero; the entry is reported as 0.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtmReport {
    pub features: Vec<NtmFeature>,
    pub mean_gap: f64,
}

pub fn normalized_trajectory_mean(real: &TrajectoryMatrix, sim: &TrajectoryMatrix, mode: NtmNormalization) -> Result<NtmReport> {
    if real.n_features != sim.n_features {
        return domain("real and simulated matrices have different feature counts");
    }
    if real.values.is_empty() || sim.values.is_empty() {
        return domain("NTM needs at least one real and one simulated rollout");
    }
    let mut features = Vec::with_capacity(real.n_features);
    for f in 0..real.n_features {
        let ss = real.observed_sum_squares(f);
        let denom = match mode {
            NtmNormalization::SumOfSquares => ss,
            NtmNormalization::RootMeanSquare => (ss / real.observed_count() as f64).sqrt(),
        };
        if denom == 0.0 || !denom.is_finite() {
            log::warn!("feature {f}: real values are all zero, NTM not defined");
            features.push(NtmFeature { feature: f, real: 0.0, sim: 0.0, gap: 0.0, degenerate: true });
            continue;
        }
        let r = real.feature_mean(f) / denom;
        let s = sim.feature_mean(f) / denom;
        features.push(NtmFeature { feature: f, real: r, sim: s, gap: (s - r).abs(), degenerate: false });
    }
    let used: Vec<f64> = features.iter().filter(|f| !f.degenerate).map(|f| f.gap).collect();
    let mean_gap = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
    Ok(NtmReport { features, mean_gap })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub quantity: String,
    pub bin: String,
    pub physician: usize,
    pub agent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub rows: Vec<HistogramRow>,
    pub dominant_action: usize,
    pub dominant_share: f64,
    /// One action carries more than 90% of the agent's choices.
    pub policy_collapse: bool,
}

/// Undiscounted return of a recorded stay under `spec`.
pub fn physician_return(ep: &PatientEpisode, spec: &RewardSpec) -> Result<f64> {
    let steps = &ep.actions[..ep.n_transitions()];
    let per_step = match spec.formulation {
        RewardFormulation::TerminalOnly => 0.0,
        RewardFormulation::TerminalMinusIntensity => -steps.iter().map(|a| a.intensity()).sum::<f64>(),
        RewardFormulation::SofaLactateShaped => ep.raw_states.windows(2).map(|w| shaped_reward(&w[0], &w[1], spec)).sum::<Result<f64>>()?,
    };
    Ok(per_step + spec.terminal_reward(ep.outcome))
}

/// Physician statistics in the same layout as agent rollouts. Lengths count transitions.
pub fn physician_stats(cohort: &Cohort, spec: &RewardSpec) -> Result<PolicyStats> {
    let mut stats = PolicyStats::empty();
    for ep in &cohort.episodes {
        for a in &ep.actions[..ep.n_transitions()] {
            stats.action_counts[a.code()] += 1;
        }
        stats.lengths.push(ep.n_transitions());
        stats.returns.push(physician_return(ep, spec)?);
    }
    Ok(stats)
}

fn binned(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut out = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for v in values {
        let i = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
        out[i.clamp(0, bins as isize - 1) as usize] += 1;
    }
    out
}

/// Aligned action, length and return histograms for physician vs agent.
pub fn compare_policy_distributions(physician: &PolicyStats, agent: &PolicyStats, bins: usize) -> Result<PolicyComparison> {
    if physician.lengths.is_empty() || agent.lengths.is_empty() {
        return domain("both policies need at least one episode");
    }
    if bins == 0 {
        return domain("bins must be >= 1");
    }
    let mut rows = Vec::new();
    for a in 0..N_ACTIONS {
        rows.push(HistogramRow {
            quantity: "action".into(),
            bin: a.to_string(),
            physician: physician.action_counts[a],
            agent: agent.action_counts[a],
        });
    }
    let max_len = physician.lengths.iter().chain(&agent.lengths).copied().max().unwrap_or(0);
    for l in 0..=max_len {
        rows.push(HistogramRow {
            quantity: "length".into(),
            bin: l.to_string(),
            physician: physician.lengths.iter().filter(|x| **x == l).count(),
            agent: agent.lengths.iter().filter(|x| **x == l).count(),
        });
    }
    let all = physician.returns.iter().chain(&agent.returns);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (p, g) = (binned(&physician.returns, lo, hi, bins), binned(&agent.returns, lo, hi, bins));
    let width = (hi - lo) / bins as f64;
    for i in 0..bins {
        rows.push(HistogramRow {
            quantity: "return".into(),
            bin: format!("[{}, {})", lo + width * i as f64, lo + width * (i + 1) as f64),
            physician: p[i],
            agent: g[i],
        });
    }
    let total: usize = agent.action_counts.iter().sum();
    let dominant_action = crate::agent::argmax(&agent.action_counts.iter().map(|c| *c as f64).collect::<Vec<_>>());
    let dominant_share = if total == 0 { 0.0 } else { agent.action_counts[dominant_action] as f64 / total as f64 };
    Ok(PolicyComparison { rows, dominant_action, dominant_share, policy_collapse: dominant_share > 0.9 })
}

/// One row of the tidy trajectory export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub variant: String,
    pub mode: String,
    pub episode: String,
    pub feature: String,
    pub t: usize,
    /// Empty when that side's episode has already ended.
    pub real: Option<f64>,
    pub sim: Option<f64>,
}

pub fn write_tidy<W: Write>(rows: &[TidyRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
