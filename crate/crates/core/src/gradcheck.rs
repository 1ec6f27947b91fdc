//! Central finite-difference gradient checking.
//!
//! Intended for `f64` instantiations: the analytic gradient from
//! [`Tape::backward`] is compared against `(f(θ+ε) − f(θ−ε)) / 2ε` at
//! sampled parameter coordinates.
//!
//! A central difference is only a valid derivative estimate when `f` is
//! smooth on `[θ−ε, θ+ε]`. For networks with ReLUs that fails whenever the
//! perturbation moves some ReLU input across zero, so each evaluation also
//! records the tape's ReLU sign pattern. Coordinates whose perturbation
//! changes the pattern are reported as kink crossings, kept out of the error
//! statistic, and replaced by a fresh draw.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Real;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero compare on an absolute scale of this size.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub crossed_kink: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Every evaluated coordinate, including kink crossings.
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn smooth(&self) -> impl Iterator<Item = &CoordCheck> {
        self.checks.iter().filter(|c| !c.crossed_kink)
    }

    pub fn smooth_count(&self) -> usize {
        self.smooth().count()
    }

    pub fn kink_count(&self) -> usize {
        self.checks.len() - self.smooth_count()
    }

    /// Largest relative error over coordinates that did not cross a kink.
    pub fn max_rel_err(&self) -> f64 {
        self.smooth().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.smooth().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Runs `loss_fn` once with backward, then checks coordinates drawn
/// uniformly over all trainable scalars until `samples` of them were smooth
/// (or every coordinate once, when there are no more than `samples`).
/// Draws stop after `20 · samples` attempts.
pub fn check<T, F>(store: &mut ParamStore<T>, eps: f64, samples: usize, seed: u64, loss_fn: F) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss)?;
    tape.accumulate_param_grads(store);

    let base_pattern = tape.relu_pattern();

    let coords: Vec<(ParamId, usize)> = (0..store.len())
        .map(ParamId)
        .filter(|&id| store.get(id).trainable)
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    let exhaustive = coords.len() <= samples;
    let mut rng = Rng::new(seed);
    let mut next = 0usize;

    let eval = |store: &ParamStore<T>| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        Ok((tape.value(loss).data()[0].as_f64(), tape.relu_pattern()))
    };

    let mut checks = Vec::with_capacity(samples);
    let mut smooth = 0;
    let max_attempts = if exhaustive { coords.len() } else { 20 * samples };
    while smooth < samples && checks.len() < max_attempts {
        let (id, i) = if exhaustive {
            next += 1;
            coords[next - 1]
        } else {
            coords[rng.int_range(0, coords.len() - 1)]
        };
        let orig = store.get(id).value.data()[i];
        let step = T::from_f64_lossy(eps);
        store.get_mut(id).value.data_mut()[i] = orig + step;
        let (plus, pat_plus) = eval(store)?;
        store.get_mut(id).value.data_mut()[i] = orig - step;
        let (minus, pat_minus) = eval(store)?;
        store.get_mut(id).value.data_mut()[i] = orig;
        let crossed_kink = pat_plus != base_pattern || pat_minus != base_pattern;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = store.get(id).grad[i].as_f64();
        smooth += usize::from(!crossed_kink);
        checks.push(CoordCheck {
            param: store.get(id).name.clone(),
            index: i,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
            crossed_kink,
        });
    }
    Ok(GradCheckReport { checks })
}
