//! Episodic cohort schema: states, action codes, CSV ingestion/export,
//! normalization, and train/validation splitting.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub const N_FEATURES: usize = 46;
pub const N_ACTIONS: usize = 25;
pub const N_DOSE_BINS: usize = 5;

/// Joint IV-fluid / vasopressor action, packed iv-major: `code = 5 * iv_bin + vaso_bin`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct ActionCode(u8);

impl ActionCode {
    pub fn new(code: usize) -> Result<Self> {
        if code >= N_ACTIONS {
            return domain(format!("action code {code} outside [0, {}]", N_ACTIONS - 1));
        }
        Ok(Self(code as u8))
    }

    pub fn from_bins(iv_bin: usize, vaso_bin: usize) -> Result<Self> {
        if iv_bin >= N_DOSE_BINS || vaso_bin >= N_DOSE_BINS {
            return domain(format!("dose bins ({iv_bin}, {vaso_bin}) outside [0, 4]"));
        }
        Ok(Self((iv_bin * N_DOSE_BINS + vaso_bin) as u8))
    }

    pub fn code(self) -> usize {
        self.0 as usize
    }

    pub fn bins(self) -> (usize, usize) {
        (self.code() / N_DOSE_BINS, self.code() % N_DOSE_BINS)
    }

    /// Sum of the two dose bins, in `[0, 8]`.
    pub fn intensity(self) -> f64 {
        let (iv, vaso) = self.bins();
        (iv + vaso) as f64
    }

    pub fn one_hot(self) -> [f64; N_ACTIONS] {
        let mut v = [0.0; N_ACTIONS];
        v[self.code()] = 1.0;
        v
    }

    pub fn all() -> impl Iterator<Item = ActionCode> {
        (0..N_ACTIONS as u8).map(ActionCode)
    }
}

impl TryFrom<usize> for ActionCode {
    type Error = Error;
    fn try_from(code: usize) -> Result<Self> {
        Self::new(code)
    }
}

impl From<ActionCode> for usize {
    fn from(a: ActionCode) -> usize {
        a.code()
    }
}

impl fmt::Display for ActionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn decode_action(code: usize) -> Result<(usize, usize)> {
    Ok(ActionCode::new(code)?.bins())
}

pub fn action_intensity(code: usize) -> Result<f64> {
    Ok(ActionCode::new(code)?.intensity())
}

/// A 46-feature clinical state. All entries are finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != N_FEATURES {
            return domain(format!("state has {} features, expected {N_FEATURES}", values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return domain(format!("state feature {i} is not finite"));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; N_FEATURES])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for StateVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<StateVector> for Vec<f64> {
    fn from(s: StateVector) -> Vec<f64> {
        s.0
    }
}

impl std::ops::Deref for StateVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Release,
    Death,
}

impl Outcome {
    pub fn label(self) -> f64 {
        match self {
            Outcome::Release => 0.0,
            Outcome::Death => 1.0,
        }
    }

    fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Outcome::Release),
            1 => Some(Outcome::Death),
            _ => None,
        }
    }
}

/// One subject's stay. `states` are normalized with the owning cohort's
/// statistics; `raw_states` keep the values as ingested.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientEpisode {
    pub subject_id: String,
    pub states: Vec<StateVector>,
    pub raw_states: Vec<StateVector>,
    pub actions: Vec<ActionCode>,
    pub outcome: Outcome,
}

impl PatientEpisode {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_transitions(&self) -> usize {
        self.len().saturating_sub(1)
    }
}

/// Per-feature `(mean, std)` used to standardize states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub feature_names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Population mean/std over `rows`; constant columns get std 1.
    pub fn fit<'a>(feature_names: Vec<String>, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let d = feature_names.len();
        let rows: Vec<&[f64]> = rows.collect();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { feature_names, mean, std }
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| (x - m) / s).collect()
    }

    pub fn denormalize_feature(&self, index: usize, value: f64) -> f64 {
        value * self.std[index] + self.mean[index]
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(i, v)| self.denormalize_feature(i, *v)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let stats: Self = serde_json::from_str(s)?;
        if stats.mean.len() != N_FEATURES || stats.std.len() != N_FEATURES || stats.feature_names.len() != N_FEATURES {
            return domain("normalization stats must have 46 entries");
        }
        if stats.std.iter().any(|s| !(*s > 0.0)) {
            return domain("normalization std entries must be positive");
        }
        Ok(stats)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub episodes: Vec<PatientEpisode>,
    pub stats: NormalizationStats,
}

impl Cohort {
    /// Builds a cohort from raw episodes, fitting statistics on all of their rows.
    pub fn from_raw(episodes: Vec<PatientEpisode>, feature_names: Vec<String>) -> Self {
        let stats = NormalizationStats::fit(feature_names, episodes.iter().flat_map(|e| e.raw_states.iter().map(|s| s.as_slice())));
        let mut cohort = Self { episodes, stats };
        cohort.renormalize(cohort.stats.clone());
        cohort
    }

    pub fn renormalize(&mut self, stats: NormalizationStats) {
        for ep in &mut self.episodes {
            ep.states = ep.raw_states.iter().map(|s| StateVector(stats.normalize(s))).collect();
        }
        self.stats = stats;
    }

    pub fn feature_names(&self) -> &[String] {
        &self.stats.feature_names
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    pub fn n_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.n_transitions()).sum()
    }

    pub fn initial_states(&self) -> Vec<StateVector> {
        self.episodes.iter().map(|e| e.states[0].clone()).collect()
    }

    pub fn death_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.outcome.label()).sum::<f64>() / self.len() as f64
    }
}

pub fn default_feature_names() -> Vec<String> {
    (0..N_FEATURES).map(|i| format!("f_{i}")).collect()
}

/// Column names for each field of the episode CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSchema {
    pub subject_id: String,
    pub step: String,
    pub features: Vec<String>,
    pub action: String,
    pub terminal: String,
    pub outcome: String,
}

impl Default for CohortSchema {
    fn default() -> Self {
        Self {
            subject_id: "subject_id".into(),
            step: "step".into(),
            features: default_feature_names(),
            action: "action".into(),
            terminal: "terminal".into(),
            outcome: "outcome".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows: usize,
    /// Subjects dropped because they never reach a terminal row.
    pub skipped_subjects: usize,
}

pub fn load_cohort(path: impl AsRef<Path>, schema: &CohortSchema) -> Result<Cohort> {
    let file = std::fs::File::open(path)?;
    let (cohort, report) = read_cohort(file, schema)?;
    if report.skipped_subjects > 0 {
        log::warn!("skipped {} incomplete subjects", report.skipped_subjects);
    }
    Ok(cohort)
}

struct RawRow {
    step: i64,
    features: Vec<f64>,
    action: ActionCode,
    terminal: bool,
    outcome: Option<Outcome>,
    row: usize,
}

pub fn read_cohort<R: Read>(reader: R, schema: &CohortSchema) -> Result<(Cohort, LoadReport)> {
    if schema.features.len() != N_FEATURES {
        return domain(format!("schema lists {} feature columns, expected {N_FEATURES}", schema.features.len()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col =
        |name: &str| -> Result<usize> { headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Schema(name.to_string())) };
    let subject_col = col(&schema.subject_id)?;
    let step_col = col(&schema.step)?;
    let feature_cols = schema.features.iter().map(|f| col(f)).collect::<Result<Vec<_>>>()?;
    let action_col = col(&schema.action)?;
    let terminal_col = col(&schema.terminal)?;
    let outcome_col = col(&schema.outcome)?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawRow>> = HashMap::new();
    let mut report = LoadReport::default();

    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let cell = |c: usize| record.get(c).unwrap_or("").trim();
        let parse_f64 = |c: usize, what: &str| -> Result<f64> {
            let v: f64 =
                cell(c).parse().map_err(|_| Error::Parse { row, message: format!("{what}: cannot parse {:?} as a number", cell(c)) })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, message: format!("{what}: non-finite value") });
            }
            Ok(v)
        };
        let parse_int = |c: usize, what: &str| -> Result<i64> {
            cell(c).parse::<i64>().map_err(|_| Error::Parse { row, message: format!("{what}: cannot parse {:?} as an integer", cell(c)) })
        };

        let subject = cell(subject_col).to_string();
        let step = parse_int(step_col, "step")?;
        let features = feature_cols.iter().zip(&schema.features).map(|(&c, name)| parse_f64(c, name)).collect::<Result<Vec<_>>>()?;
        let action_raw = parse_int(action_col, "action")?;
        let action = usize::try_from(action_raw)
            .ok()
            .and_then(|a| ActionCode::new(a).ok())
            .ok_or_else(|| Error::Parse { row, message: format!("action {action_raw} outside [0, 24]") })?;
        let terminal = match parse_int(terminal_col, "terminal")? {
            0 => false,
            1 => true,
            t => return Err(Error::Parse { row, message: format!("terminal flag {t} is not 0/1") }),
        };
        let outcome = if cell(outcome_col).is_empty() {
            None
        } else {
            let code = parse_int(outcome_col, "outcome")?;
            Some(Outcome::from_code(code).ok_or_else(|| Error::Parse { row, message: format!("outcome {code} is not 0/1") })?)
        };
        if terminal && outcome.is_none() {
            return Err(Error::Parse { row, message: "terminal row without outcome".into() });
        }

        if !groups.contains_key(&subject) {
            order.push(subject.clone());
        }
        groups.entry(subject).or_default().push(RawRow { step, features, action, terminal, outcome, row });
        report.rows += 1;
    }

    let mut episodes = Vec::with_capacity(order.len());
    for subject in order {
        let mut rows = groups.remove(&subject).unwrap_or_default();
        if rows.is_empty() {
            report.skipped_subjects += 1;
            continue;
        }
        rows.sort_by_key(|r| r.step);
        let last = rows.len() - 1;
        if let Some(early) = rows[..last].iter().find(|r| r.terminal) {
            return Err(Error::Parse { row: early.row, message: format!("subject {subject} has a terminal row before its last step") });
        }
        let outcome = match (rows[last].terminal, rows[last].outcome) {
            (true, Some(o)) => o,
            _ => {
                report.skipped_subjects += 1;
                continue;
            }
        };
        let raw_states = rows.iter().map(|r| StateVector::new(r.features.clone())).collect::<Result<Vec<_>>>()?;
        let actions = rows.iter().map(|r| r.action).collect();
        episodes.push(PatientEpisode { subject_id: subject, states: raw_states.clone(), raw_states, actions, outcome });
    }

    Ok((Cohort::from_raw(episodes, schema.features.clone()), report))
}

/// Writes raw (un-normalized) values in the episode CSV layout.
pub fn write_cohort<W: Write>(cohort: &Cohort, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "step".to_string()];
    header.extend(cohort.feature_names().iter().cloned());
    header.extend(["action".to_string(), "terminal".to_string(), "outcome".to_string()]);
    w.write_record(&header)?;
    for ep in &cohort.episodes {
        let last = ep.len() - 1;
        for (t, (s, a)) in ep.raw_states.iter().zip(&ep.actions).enumerate() {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(ep.subject_id.clone());
            rec.push(t.to_string());
            rec.extend(s.iter().map(|v| v.to_string()));
            rec.push(a.to_string());
            rec.push(if t == last { "1" } else { "0" }.to_string());
            rec.push(if t == last { format!("{}", ep.outcome.label() as i64) } else { String::new() });
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_cohort(cohort, std::io::BufWriter::new(file))
}

/// Episode-level split; statistics of both halves come from the training half.
pub fn split_cohort(cohort: &Cohort, fraction: f64, seed: u64) -> Result<(Cohort, Cohort)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return domain(format!("split fraction {fraction} must lie in (0, 1)"));
    }
    let n = cohort.len();
    if n < 2 {
        return domain("need at least two episodes to split");
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let pick = |ids: &[usize]| -> Vec<PatientEpisode> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| cohort.episodes[i].clone()).collect()
    };
    let train_eps = pick(&idx[..n_train]);
    let val_eps = pick(&idx[n_train..]);
    let train = Cohort::from_raw(train_eps, cohort.feature_names().to_vec());
    let mut val = Cohort { episodes: val_eps, stats: train.stats.clone() };
    val.renormalize(train.stats.clone());
    Ok((train, val))
}
