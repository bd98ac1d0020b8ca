//! Central finite-difference verification of tape gradients.

use rand::Rng;

use super::tape::{NodeId, ParamStore, Tape};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Picks up to `count` distinct `(tensor, index)` positions uniformly over all scalars.
pub fn sample_probes<R: Rng + ?Sized>(store: &ParamStore, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let total = store.num_scalars();
    let picks = rand::seq::index::sample(rng, total, count.min(total));
    let mut probes: Vec<(usize, usize)> = picks
        .into_iter()
        .map(|mut flat| {
            for (ti, t) in store.tensors().iter().enumerate() {
                if flat < t.len() {
                    return (ti, flat);
                }
                flat -= t.len();
            }
            unreachable!("flat index below num_scalars")
        })
        .collect();
    probes.sort_unstable();
    probes
}

/// Compares `analytic` gradients (one vector per tensor) against central
/// differences of `loss` at the given probes; returns the max relative error.
pub fn compare_gradients<F>(store: &mut ParamStore, analytic: &[Vec<f64>], probes: &[(usize, usize)], h: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = loss(store, &mut tape)?;
        Ok(tape.scalar(root))
    };
    let mut worst = 0.0f64;
    for &(ti, i) in probes {
        let orig = store.tensors()[ti].values[i];
        store.tensors_mut()[ti].values[i] = orig + h;
        let up = eval(store)?;
        store.tensors_mut()[ti].values[i] = orig - h;
        let down = eval(store)?;
        store.tensors_mut()[ti].values[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[ti][i], numeric));
    }
    Ok(worst)
}

/// Runs `loss` once with back-propagation, then checks `probe_count` random
/// parameters against central differences with step `h`. `loss` must be a
/// deterministic function of the parameters.
pub fn check_gradients<F, R>(store: &mut ParamStore, mut loss: F, probe_count: usize, h: f64, rng: &mut R) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<NodeId>,
    R: Rng + ?Sized,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let root = loss(store, &mut tape)?;
    tape.backward(root, store)?;
    let analytic = store.grads();
    store.zero_grad();
    let probes = sample_probes(store, probe_count, rng);
    compare_gradients(store, &analytic, &probes, h, loss)
}
