//! Central finite-difference gradient checking.
//!
//! The checker perturbs the stored values of candle `Var`s in place and
//! re-evaluates a scalar closure, so it works for block inputs and for layer
//! parameters alike. It never looks at the autograd graph beyond the single
//! analytic gradient it is comparing against.

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Worst mismatch found by [`check`].
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_var: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Entries whose analytic and numeric magnitudes are both below this are
/// compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().sum())
}

/// Compares autograd gradients of `f` w.r.t. each var against central
/// differences with step `step`. At most `max_per_var` evenly spaced entries
/// of each var are probed. All vars must be f64.
pub fn check(vars: &[Var], step: f64, max_per_var: usize, f: impl Fn() -> Result<Tensor>) -> Result<GradReport> {
    for v in vars {
        if v.dtype() != DType::F64 {
            return Err(Error::Config("gradient checks run in double precision".into()));
        }
    }
    let loss = f()?;
    let grads = loss.backward()?;
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_var: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (vi, var) in vars.iter().enumerate() {
        let n = var.elem_count();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let probes = max_per_var.min(n);
        for p in 0..probes {
            let idx = if probes == n { p } else { p * n / probes };
            let eval_at = |delta: f64| -> Result<f64> {
                let mut data = original.clone();
                data[idx] += delta;
                var.set(&Tensor::from_vec(data, var.shape(), var.device())?)?;
                scalar(&f()?)
            };
            let plus = eval_at(step)?;
            let minus = eval_at(-step)?;
            var.set(&Tensor::from_vec(original.clone(), var.shape(), var.device())?)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_var = vi;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Σ out ⊙ R for a fixed random R, turning any output into a scalar whose
/// gradient exercises the full Jacobian.
pub fn projected_sum(out: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..out.elem_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = Tensor::from_vec(r, out.shape(), out.device())?.to_dtype(out.dtype())?;
    Ok((out * r)?.sum_all()?)
}

/// Seeded standard-normal f64 var, for gradient-check inputs.
pub fn random_var(shape: impl Into<candle_core::Shape>, seed: u64) -> Result<Var> {
    let shape = shape.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.elem_count())
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Ok(Var::from_tensor(&Tensor::from_vec(data, shape, &candle_core::Device::Cpu)?)?)
}
