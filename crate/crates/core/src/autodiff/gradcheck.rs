//! Central finite-difference gradient checks in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Worst coordinate found by a check.
#[derive(Clone, Copy, Debug, Default)]
pub struct CheckReport {
    /// `max |analytic − numeric| / (|numeric| + 1e-8)`
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_tensor: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CheckReport {
    fn record(&mut self, tensor: usize, coord: usize, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
        self.checked += 1;
        if rel > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst_tensor = tensor;
            self.worst_coord = coord;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn coords(len: usize, opts: &CheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(m) if m < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut v = sample(&mut rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Central difference, reported as exactly zero when the two evaluations
/// differ by no more than the rounding resolution of the loss itself. Such a
/// difference carries no information, and the analytic value must then be
/// below the absolute floor of the relative-error metric to pass.
fn central_difference(plus: f64, minus: f64, step: f64) -> f64 {
    let resolution = 64.0 * f64::EPSILON * plus.abs().max(minus.abs());
    if (plus - minus).abs() <= resolution {
        0.0
    } else {
        (plus - minus) / (2.0 * step)
    }
}

fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Checks `d f / d inputs` where `f` builds a scalar from variables bound to `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], opts: CheckOptions, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(scalar(&tape, out))
    };

    let mut report = CheckReport::default();
    let mut work = inputs.to_vec();
    for ti in 0..inputs.len() {
        for c in coords(inputs[ti].numel(), &opts, ti as u64) {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + opts.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - opts.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = central_difference(plus, minus, opts.step);
            report.record(ti, c, analytic[ti].data()[c], numeric);
        }
    }
    Ok(report)
}

/// Checks `d f / d params` for every tensor in `store`.
pub fn check_params<F>(store: &mut ParamStore<f64>, opts: CheckOptions, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out)?;
    let analytic: Vec<Option<Tensor<f64>>> = tape.param_grads(store);

    let ids: Vec<_> = store.ids().collect();
    let mut report = CheckReport::default();
    for (ti, &id) in ids.iter().enumerate() {
        let len = store.get(id).numel();
        for c in coords(len, &opts, ti as u64) {
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + opts.step;
            let mut t = Tape::new();
            let o = f(&mut t, store)?;
            let plus = scalar(&t, o);
            store.get_mut(id).data_mut()[c] = orig - opts.step;
            let mut t = Tape::new();
            let o = f(&mut t, store)?;
            let minus = scalar(&t, o);
            store.get_mut(id).data_mut()[c] = orig;
            let numeric = central_difference(plus, minus, opts.step);
            let a = analytic[ti].as_ref().map_or(0.0, |g| g.data()[c]);
            report.record(ti, c, a, numeric);
        }
    }
    Ok(report)
}

/// Scalar probe `mean(r ⊙ out²)` with a fixed random `r ∈ [0.5, 1.5)`. Every
/// output contributes with a distinct weight and no terms cancel, so the
/// magnitude of the probe bounds its own rounding error.
pub fn random_probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::rand_uniform(tape.shape(out), 0.5, 1.5, &mut rng);
    let r = tape.constant(r);
    let sq = tape.mul(out, out)?;
    let p = tape.mul(sq, r)?;
    Ok(tape.mean(p))
}
