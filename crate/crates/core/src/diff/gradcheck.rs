//! Central-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Per-parameter comparison between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(‖analytic‖∞, ‖numeric‖∞)` for
    /// each parameter tensor; `0` when both gradients vanish.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
}

/// Compares reverse-mode gradients of `f` with `(f(θ+h) - f(θ-h)) / 2h`.
///
/// `f` records a scalar loss on the given tape from leaves holding `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    contract!(step > 0.0, "finite-difference step must be positive, got {step}");
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let mut numeric = vec![0.0; params[pi].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, x| m.max(x.abs()));
        let err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        per_param.push(if scale == 0.0 { 0.0 } else { err / scale });
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
    })
}
