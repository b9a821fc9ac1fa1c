//! Central finite-difference checks for tape gradients.
//!
//! Each real component of each input is perturbed by `±step` and the loss
//! rebuilt from scratch. Under the tape convention the real part of the
//! analytic gradient must match the derivative along the real axis and the
//! imaginary part the derivative along the imaginary axis.

use super::autodiff::{Tape, Var};
use super::matrix::{ComplexMatrix, C64};
use crate::error::Result;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric|` over all real components.
    pub max_abs_error: f64,
    /// Largest `|numeric|` over all real components.
    pub max_abs_grad: f64,
    /// `max_abs_error / max(max_abs_grad, 1e-12)`.
    pub relative_error: f64,
    /// Number of real components checked.
    pub components: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.relative_error < tol && self.relative_error.is_finite()
    }
}

/// Compare `analytic[i]` against central differences of `loss` around `inputs`.
pub fn compare<F>(
    inputs: &[ComplexMatrix],
    analytic: &[ComplexMatrix],
    step: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[ComplexMatrix]) -> Result<f64>,
{
    let mut work: Vec<ComplexMatrix> = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (p, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[p].len() {
            for imag in [false, true] {
                let dir = if imag { C64::new(0.0, step) } else { C64::new(step, 0.0) };
                let orig = work[p].data()[e];
                work[p].data_mut()[e] = orig + dir;
                let plus = loss(&work)?;
                work[p].data_mut()[e] = orig - dir;
                let minus = loss(&work)?;
                work[p].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let g = grad.data()[e];
                let a = if imag { g.im } else { g.re };
                report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
                report.max_abs_grad = report.max_abs_grad.max(numeric.abs());
                report.components += 1;
            }
        }
    }
    report.relative_error = report.max_abs_error / report.max_abs_grad.max(1e-12);
    Ok(report)
}

/// Build a loss on a fresh tape with every input as a leaf, backpropagate,
/// and compare against central differences of the same builder.
pub fn check_tape<F>(inputs: &[ComplexMatrix], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let l = build(&mut tape, &vars)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<ComplexMatrix> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, m)| grads.get_or_zeros(v, m.shape()))
        .collect();
    compare(inputs, &analytic, step, |xs| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|m| t.constant(m.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l)[(0, 0)].re)
    })
}
