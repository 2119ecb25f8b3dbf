//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Step of the five-point central stencil.
    pub step: f64,
    /// Denominator floor of the relative error; gradients smaller than this
    /// are compared on an absolute scale.
    pub floor: f64,
    /// Check at most this many coordinates per input (randomly chosen).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_abs_error).fold(0.0, f64::max)
    }
}

fn coords(numel: usize, opts: &GradCheckOptions, salt: usize) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < numel => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (salt as u64).wrapping_mul(0x9E37_79B9));
            let mut idx = sample(&mut rng, numel, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..numel).collect(),
    }
}

fn compare(
    input: usize,
    analytic: &[f64],
    idx: &[usize],
    opts: &GradCheckOptions,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<InputReport> {
    let mut rep = InputReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: idx.len(),
    };
    for &i in idx {
        let h = opts.step;
        let f = [eval(i, 2.0 * h)?, eval(i, h)?, eval(i, -h)?, eval(i, -2.0 * h)?];
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::OracleFailure { input, index: i });
        }
        let numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
        rep.max_abs_error = rep.max_abs_error.max(abs);
        if rel > rep.max_rel_error {
            rep.max_rel_error = rel;
            rep.worst_index = i;
        }
    }
    Ok(rep)
}

fn scalar_of(tape: &Tape<'_>, v: Var, input: usize) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::shape("gradcheck objective", t.shape(), &[1, 1]));
    }
    let x = t.data()[0];
    if !x.is_finite() {
        return Err(Error::OracleFailure { input, index: usize::MAX });
    }
    Ok(x)
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// finite differences, one report per input tensor.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'static>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::detached();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&mut tape, &vars)?;
        let y = scalar_of(&tape, out, 0)?;
        if !grad {
            return Ok((y, None));
        }
        let g = tape.backward(out)?;
        Ok((y, Some(vars.iter().map(|&v| g.wrt_or_zero(&tape, v)).collect())))
    };

    let (_, analytic) = run(inputs, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        let idx = coords(inputs[k].numel(), opts, k);
        let rep = compare(k, grad, &idx, opts, |i, h| {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let r = run(&work, false).map_err(|e| match e {
                Error::OracleFailure { .. } => Error::OracleFailure { input: k, index: i },
                other => other,
            });
            work[k].data_mut()[i] = orig;
            Ok(r?.0)
        })?;
        reports.push(rep);
    }
    Ok(GradCheckReport { inputs: reports })
}

/// Finite-difference check of parameter gradients for a loss built from
/// `store`. One report per entry of `ids`.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Tape<'s>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        scalar_of(&tape, out, 0)?;
        let g = tape.backward(out)?;
        let all = g.param_grads(&tape);
        ids.iter()
            .map(|id| all[id.index()].clone().unwrap_or_else(|| vec![0.0; store.get(*id).numel()]))
            .collect::<Vec<_>>()
    };

    let mut work = store.clone();
    let mut reports = Vec::with_capacity(ids.len());
    for (k, &id) in ids.iter().enumerate() {
        let idx = coords(store.get(id).numel(), opts, k);
        let rep = compare(k, &analytic[k], &idx, opts, |i, h| {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let y = {
                let mut tape = Tape::no_grad(&work);
                let out = f(&mut tape)?;
                let t = tape.value(out);
                t.data()[0]
            };
            work.get_mut(id).data_mut()[i] = orig;
            if !y.is_finite() {
                return Err(Error::OracleFailure { input: k, index: i });
            }
            Ok(y)
        })?;
        reports.push(rep);
    }
    Ok(GradCheckReport { inputs: reports })
}
