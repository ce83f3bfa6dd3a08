//! Central finite-difference gradient checking.
//!
//! The analytic side backpropagates `Σ w ⊙ f(inputs)` for a fixed random
//! projection `w` (one for a scalar `f`); the numeric side perturbs each
//! input element by ±h and differences the projected outputs, accumulated in
//! f64.
//!
//! The error of one input tensor is `max|a − n| / max(max|a|, max|n|, floor)`
//! over its elements. Element-wise ratios are meaningless for entries whose
//! true gradient is near zero, where f32 rounding noise dominates. The step
//! used as divisor is the one actually representable in f32. Elements whose
//! one-sided differences disagree sharply sit on a kink (ReLU, max) and are
//! skipped and counted instead of compared.
//!
//! A tensor whose gradient is tiny compared with the function value cannot
//! reach a small per-tensor error in f32; for deep compositions the
//! normwise error over all inputs is the meaningful figure.

use crate::error::Result;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub const STEP: f32 = 1e-3;
pub const ABS_FLOOR: f32 = 1e-5;
/// One-sided difference quotients disagreeing by more than
/// `KINK_REL·max + KINK_ABS` mark a kink.
pub const KINK_ABS: f64 = 1e-3;
pub const KINK_REL: f64 = 1e-2;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// Largest per-tensor relative error.
    pub max_rel_err: f32,
    /// Index of the input tensor with that error.
    pub worst_input: usize,
    /// `max|a − n| / max(|a|, |n|, floor)` taken over all inputs at once.
    pub normwise_rel_err: f32,
    pub checked: usize,
    /// Elements skipped because the perturbation crossed a kink.
    pub kinks: usize,
}

fn projected<F>(f: &F, xs: &[Tensor], projection: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&tape, &vars)?.value();
    Ok(y.data().iter().zip(projection.data()).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum())
}

/// Compares analytic and numeric gradients of `f` with respect to every
/// element of every input.
pub fn check<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let projection = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?.value();
        let mut r = rng::derive(seed, 0x6772_6164);
        if out.numel() == 1 {
            Tensor::full(out.shape(), 1.0)
        } else {
            Tensor::from_fn(out.shape(), |_| rng::normal(&mut r))
        }
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let w = tape.constant(projection.clone());
    let loss = out.mul(w)?.sum();
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst = 0.0f32;
    let mut worst_input = 0;
    let (mut total_err, mut total_scale) = (0.0f64, f64::from(ABS_FLOOR));
    let mut checked = 0;
    let mut kinks = 0;
    let mut xs = inputs.to_vec();
    let base = projected(&f, &xs, &projection)?;
    for (k, grad) in analytic.iter().enumerate() {
        let mut max_err = 0.0f64;
        let mut scale = f64::from(ABS_FLOOR);
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            let (up, down) = (orig + STEP, orig - STEP);
            xs[k].data_mut()[i] = up;
            let plus = projected(&f, &xs, &projection)?;
            xs[k].data_mut()[i] = down;
            let minus = projected(&f, &xs, &projection)?;
            xs[k].data_mut()[i] = orig;
            let forward = (plus - base) / f64::from(up - orig);
            let backward = (base - minus) / f64::from(orig - down);
            if (forward - backward).abs() > KINK_REL * forward.abs().max(backward.abs()) + KINK_ABS {
                kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / f64::from(up - down);
            let a = f64::from(grad.data()[i]);
            max_err = max_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
        total_err = total_err.max(max_err);
        total_scale = total_scale.max(scale);
        let err = (max_err / scale) as f32;
        if err > worst {
            worst = err;
            worst_input = k;
        }
    }
    Ok(GradReport {
        max_rel_err: worst,
        worst_input,
        normwise_rel_err: (total_err / total_scale) as f32,
        checked,
        kinks,
    })
}
