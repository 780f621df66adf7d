//! Finite-difference check of a scalar loss against every tensor of a
//! [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::nn::{Bound, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Builds the loss from parameters bound on a fresh tape.
pub type LossFn<'a> = dyn for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>> + 'a;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Smaller relative error against the forward and backward differences.
    /// At a ReLU or max-pool kink the central difference averages two
    /// slopes while the analytic derivative equals one of them.
    pub one_sided_error: f64,
}

/// Loss value and per-parameter gradients.
pub fn loss_and_gradients(store: &ParamStore, loss: &LossFn<'_>) -> Result<(f64, ParamStore)> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let l = loss(&tape, &bound)?;
    let grads = tape.backward(l)?;
    let mut out = ParamStore::new();
    for (name, var) in bound.iter() {
        let g = grads.wrt(*var);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        out.insert(name.clone(), g);
    }
    Ok((l.item(), out))
}

fn loss_value(store: &ParamStore, loss: &LossFn<'_>) -> Result<f64> {
    let tape = Tape::new();
    let bound = store.bind_frozen(&tape);
    Ok(loss(&tape, &bound)?.item())
}

/// For each parameter tensor, compares the directional derivative along a
/// random unit direction with the central difference
/// `(L(θ + h·u) − L(θ − h·u)) / 2h`. The relative error is normalized by
/// `max(|analytic|, |numeric|, floor)`.
pub fn check_param_gradients(
    store: &ParamStore,
    loss: &LossFn<'_>,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<Vec<ParamCheck>> {
    let (base, grads) = loss_and_gradients(store, loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(store.len());
    for (name, value) in store.iter() {
        let mut dir = Tensor::from_fn(value.shape(), |_| rng.sample::<f64, _>(StandardNormal));
        let norm = dir.norm();
        dir = dir.scale(1.0 / norm);
        let analytic = grads.get(name)?.dot(&dir)?;
        let mut perturbed = store.clone();
        perturbed.get_mut(name)?.axpy(h, &dir)?;
        let plus = loss_value(&perturbed, loss)?;
        perturbed.get_mut(name)?.axpy(-2.0 * h, &dir)?;
        let minus = loss_value(&perturbed, loss)?;
        let rel = |numeric: f64| (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        let numeric = (plus - minus) / (2.0 * h);
        let one_sided_error = rel((plus - base) / h).min(rel((base - minus) / h));
        out.push(ParamCheck { name: name.clone(), analytic, numeric, rel_error: rel(numeric), one_sided_error });
    }
    Ok(out)
}

/// Pins a closure to the higher-ranked signature expected by [`LossFn`].
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    f
}
