use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerConfig};
use super::tape::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { max_epochs: 20, patience: 3, batch_size: 32, seed: 0 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Domain(format!("schedule needs max_epochs, patience and batch_size >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// A model that can record a per-sample loss on a tape.
pub trait Trainable {
    type Sample;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Records the loss of one sample; stochastic models draw noise from `rng`.
    fn record_loss(&self, tape: &mut Tape, sample: &Self::Sample, rng: &mut ChaCha8Rng) -> Result<NodeId>;

    /// Validation metric, lower is better. Defaults to the mean loss under a fixed noise seed.
    fn validation_metric(&self, samples: &[Self::Sample]) -> Result<f64> {
        mean_loss(self, samples, 0)
    }
}

pub fn mean_loss<M: Trainable + ?Sized>(model: &M, samples: &[M::Sample], seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let mut total = 0.0;
    for s in samples {
        tape.clear();
        let l = model.record_loss(&mut tape, s, &mut rng)?;
        total += tape.scalar(l);
    }
    Ok(total / samples.len() as f64)
}

/// Patience-based early stopping on a metric to be minimized.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, since_best: 0 }
    }

    /// Records `metric` for `epoch` (1-based); returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub stopped_early: bool,
}

/// Mini-batch training with early stopping on `val` (or on the training loss
/// when `val` is empty). Parameters of the best epoch are restored on return.
pub fn fit<M: Trainable>(
    model: &mut M,
    train: &[M::Sample],
    val: &[M::Sample],
    schedule: &TrainSchedule,
    optimizer: OptimizerConfig,
) -> Result<FitHistory> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("cannot fit on an empty dataset".into()));
    }
    let mut opt = Optimizer::new(optimizer, model.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(schedule.patience);
    let mut best_snapshot = model.params().snapshot();
    let mut epochs = Vec::new();
    let mut tape = Tape::new();

    for epoch in 1..=schedule.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            model.params_mut().zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                tape.clear();
                let loss = model.record_loss(&mut tape, &train[i], &mut rng)?;
                total += tape.scalar(loss);
                tape.backward_scaled(loss, scale, model.params_mut())?;
            }
            opt.step(model.params_mut());
        }
        let train_loss = total / train.len() as f64;
        let val_metric = if val.is_empty() { model.validation_metric(train)? } else { model.validation_metric(val)? };
        if !val_metric.is_finite() {
            log::warn!("epoch {epoch}: non-finite validation metric");
        }
        epochs.push(EpochRecord { epoch, train_loss, val_metric });
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_metric:.6}");
        if stopper.observe(epoch, val_metric) {
            best_snapshot = model.params().snapshot();
        }
        if stopper.should_stop() {
            break;
        }
    }
    model.params_mut().restore(&best_snapshot);
    model.params_mut().zero_grad();
    let stopped_early = epochs.len() < schedule.max_epochs;
    Ok(FitHistory { best_epoch: stopper.best_epoch().unwrap_or(0), best_val_metric: stopper.best(), epochs, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::layers::Dense;
    use crate::learner::tape::Activation;

    #[test]
    fn early_stopping_example() {
        let mut s = EarlyStopping::new(3);
        let vals = [5.0, 4.0, 4.1, 4.2, 4.3];
        let mut stopped_at = None;
        for (i, v) in vals.iter().enumerate() {
            s.observe(i + 1, *v);
            if s.should_stop() {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(5));
        assert_eq!(s.best_epoch(), Some(2));
    }

    struct Linear {
        store: ParamStore,
        layer: Dense,
    }

    impl Trainable for Linear {
        type Sample = (Vec<f64>, f64);
        fn params(&self) -> &ParamStore {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
        fn record_loss(&self, tape: &mut Tape, s: &Self::Sample, _: &mut ChaCha8Rng) -> Result<NodeId> {
            let x = tape.leaf(s.0.clone());
            let y = self.layer.forward(tape, &self.store, x)?;
            tape.mse(y, &[s.1])
        }
    }

    fn linear(seed: u64) -> Linear {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = Dense::new(&mut store, "lin", 2, 1, Activation::Linear, &mut rng).unwrap();
        Linear { store, layer }
    }

    fn toy_data() -> Vec<(Vec<f64>, f64)> {
        (0..20)
            .map(|i| {
                let a = i as f64 / 10.0 - 1.0;
                let b = ((i * 7) % 11) as f64 / 5.0 - 1.0;
                let noise = ((i * 13) % 5) as f64 * 0.02 - 0.04;
                (vec![a, b], 1.5 * a - 0.7 * b + 0.3 + noise)
            })
            .collect()
    }

    /// Ordinary least squares via the 3x3 normal equations (Cramer's rule).
    fn ols_mse(data: &[(Vec<f64>, f64)]) -> f64 {
        let rows: Vec<[f64; 3]> = data.iter().map(|(x, _)| [x[0], x[1], 1.0]).collect();
        let mut a = [[0.0; 3]; 3];
        let mut b = [0.0; 3];
        for (r, (_, y)) in rows.iter().zip(data) {
            for i in 0..3 {
                b[i] += r[i] * y;
                for j in 0..3 {
                    a[i][j] += r[i] * r[j];
                }
            }
        }
        let det = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(a);
        let beta: Vec<f64> = (0..3)
            .map(|k| {
                let mut m = a;
                for i in 0..3 {
                    m[i][k] = b[i];
                }
                det(m) / d
            })
            .collect();
        rows.iter()
            .zip(data)
            .map(|(r, (_, y))| {
                let p: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
                (p - y) * (p - y)
            })
            .sum::<f64>()
            / data.len() as f64
    }

    #[test]
    fn linear_regression_reaches_least_squares() {
        let data = toy_data();
        let mut model = linear(1);
        let schedule = TrainSchedule { max_epochs: 3000, patience: 3000, batch_size: data.len(), seed: 1 };
        fit(&mut model, &data, &[], &schedule, OptimizerConfig::sgd(0.2)).unwrap();
        let mse = mean_loss(&model, &data, 0).unwrap();
        let oracle = ols_mse(&data);
        assert!((mse - oracle).abs() < 1e-6, "fit {mse} vs OLS {oracle}");
    }

    #[test]
    fn single_epoch_and_determinism() {
        let data = toy_data();
        let schedule = TrainSchedule { max_epochs: 1, patience: 3, batch_size: 4, seed: 5 };
        let mut a = linear(2);
        let h = fit(&mut a, &data, &data, &schedule, OptimizerConfig::default()).unwrap();
        assert_eq!(h.epochs.len(), 1);
        let mut b = linear(2);
        fit(&mut b, &data, &data, &schedule, OptimizerConfig::default()).unwrap();
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn empty_dataset_is_domain_error() {
        let mut m = linear(1);
        let r = fit(&mut m, &[], &[], &TrainSchedule::default(), OptimizerConfig::default());
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
