//! Finite-difference gradient checking in `f64`.
//!
//! The numeric side never touches the backward pass: it only re-evaluates the
//! forward computation at perturbed points.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error (L2, per input).
    pub tolerance: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub relative_errors: Vec<f64>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < self.tolerance
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Central differences of a scalar function of `len` coordinates.
/// `eval(i, delta)` must return the loss with coordinate `i` shifted by `delta`.
pub fn central_difference<F>(len: usize, step: f64, mut eval: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    (0..len)
        .map(|i| Ok((eval(i, step)? - eval(i, -step)?) / (2.0 * step)))
        .collect()
}

/// Compares tape gradients of `f` against central differences for every
/// input with `requires_grad` set. Inputs are fed to `f` in order.
pub fn check_gradients<'a, F>(inputs: &[Tensor<f64>], cfg: &GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut relative_errors = Vec::new();
    for (idx, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let analytic = grads
            .wrt(vars[idx])
            .map_or_else(|| vec![0.0; input.len()], <[f64]>::to_vec);
        let mut work = inputs.to_vec();
        let numeric = central_difference(input.len(), cfg.step, |i, delta| {
            let orig = work[idx].data()[i];
            work[idx].data_mut()[i] = orig + delta;
            let v = eval(&work);
            work[idx].data_mut()[i] = orig;
            v
        })?;
        relative_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(GradReport {
        relative_errors,
        tolerance: cfg.tolerance,
    })
}
