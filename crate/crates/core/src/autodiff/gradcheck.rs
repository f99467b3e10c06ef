//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation `h` in `(f(θ+h) − f(θ−h)) / 2h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor: relative error is `|a − n| / max(|a|, |n|, floor)`,
    /// so gradients far below the finite-difference noise level are compared
    /// absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

/// Worst disagreement found for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    /// The parameter with the largest relative error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares the tape gradient of a scalar function against central finite
/// differences for every element of every parameter.
///
/// `f` receives a fresh tape and one trainable leaf per entry of `params`;
/// it must be deterministic, so any sampling noise has to be captured by the
/// closure rather than drawn inside it. Two evaluations at the unperturbed
/// point that disagree bitwise yield [`Error::Determinism`].
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.item(loss);
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("trainable leaf has grad").to_vec())
        .collect();

    let again = eval(params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Determinism {
            first: base,
            second: again,
        });
    }

    let mut point = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (index, grads) in analytic.iter().enumerate() {
        let mut worst = ParamCheck {
            index,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (e, &a) in grads.iter().enumerate() {
            let orig = point[index].data()[e];
            point[index].data_mut()[e] = orig + opts.step;
            let up = eval(&point)?;
            point[index].data_mut()[e] = orig - opts.step;
            let down = eval(&point)?;
            point[index].data_mut()[e] = orig;
            let n = (up - down) / (2.0 * opts.step);
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(opts.floor);
            worst.max_abs_err = worst.max_abs_err.max(abs);
            if rel > worst.max_rel_err || !rel.is_finite() {
                worst.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                worst.worst_element = e;
                worst.analytic = a;
                worst.numeric = n;
            }
        }
        checks.push(worst);
    }
    Ok(GradCheckReport {
        params: checks,
        tol: opts.tol,
    })
}
