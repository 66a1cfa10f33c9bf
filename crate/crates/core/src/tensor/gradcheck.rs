//! Central finite-difference gradient checking.
//!
//! The analytic side comes from [`Tape::backward`]; the numeric side only ever
//! evaluates forward values, so the two routes share nothing but the forward
//! kernels.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Lower bound on the error denominator, `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1.0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }

    /// Compares analytic and numeric gradients of `build` for every element of
    /// every input that requires grad.
    pub fn run<F>(&self, inputs: &[Tensor], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars)?;
            Ok(tape.value(loss).item())
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.backward(loss)?;

        let mut report = GradCheckReport::default();
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ti, input) in inputs.iter().enumerate() {
            if !input.requires_grad() {
                continue;
            }
            let zeros = vec![0.0; input.numel()];
            let analytic = tape.grad(vars[ti]).unwrap_or(&zeros).to_vec();
            for (k, &a) in analytic.iter().enumerate() {
                let orig = input.data()[k];
                work[ti].data_mut()[k] = orig + self.step;
                let plus = eval(&work)?;
                work[ti].data_mut()[k] = orig - self.step;
                let minus = eval(&work)?;
                work[ti].data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let err = self.relative_error(a, numeric);
                report.checked += 1;
                if err > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(err);
                    report.worst = Some((ti, k, a, numeric));
                }
            }
        }
        Ok(report)
    }
}
