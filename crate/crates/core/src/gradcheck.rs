//! Central finite-difference checks for taped computations.
//!
//! The numeric side only evaluates forward values, so it stays independent
//! of every reverse rule it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub eps: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Tolerance {
    /// Per-primitive checks: step 1e-5, rtol 1e-3.
    pub const PRIMITIVE: Tolerance = Tolerance { eps: 1e-5, rtol: 1e-3, atol: 1e-7 };
    /// End-to-end spot checks through the full model: rtol 2e-2.
    pub const END_TO_END: Tolerance = Tolerance { eps: 1e-5, rtol: 2e-2, atol: 1e-7 };

    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= self.atol + self.rtol * analytic.abs().max(numeric.abs())
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares the tape gradient of `f` with central differences for every
/// coordinate of every input. `f` must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], tol: Tolerance, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + tol.eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - tol.eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * tol.eps);
            report.checked += 1;
            if !tol.accepts(analytic[j], numeric) {
                report.mismatches.push(Mismatch { input: i, index: j, analytic: analytic[j], numeric });
            }
        }
    }
    Ok(report)
}

/// Spot-checks parameter gradients of a model loss. `picks` lists
/// `(parameter, flat index)` pairs; `Mismatch::input` is the position in
/// `picks`.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    picks: &[(ParamId, usize)],
    tol: Tolerance,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.value(out).data()[0])
    };
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &analytic_store)?;
    tape.backward(out)?;
    analytic_store.accumulate_grads(&tape);

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (i, &(id, j)) in picks.iter().enumerate() {
        let analytic = analytic_store.get(id).grad.data()[j];
        let orig = work.get(id).value.data()[j];
        work.get_mut(id).value.data_mut()[j] = orig + tol.eps;
        let plus = eval(&work)?;
        work.get_mut(id).value.data_mut()[j] = orig - tol.eps;
        let minus = eval(&work)?;
        work.get_mut(id).value.data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * tol.eps);
        report.checked += 1;
        if !tol.accepts(analytic, numeric) {
            report.mismatches.push(Mismatch { input: i, index: j, analytic, numeric });
        }
    }
    Ok(report)
}

/// Reduces `y` to a scalar through a fixed random weighting, so a scalar
/// check exercises every output coordinate.
pub fn random_projection(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let n = tape.value(y).len();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}
