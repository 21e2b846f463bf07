//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-4,
            rel: 1e-3,
            abs: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub worst_abs: f64,
    pub worst_rel: f64,
    /// `(input, element, analytic, numeric)` for every element outside tolerance.
    pub failures: Vec<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences on every element of every input. An element passes when its
/// absolute error is within `tol.abs` or its relative error within `tol.rel`.
pub fn check_gradients<F>(inputs: &[Tensor], tol: Tolerance, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradReport {
        checked: 0,
        worst_abs: 0.0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("leaf grad").to_vec();
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + tol.step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - tol.step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * tol.step);
            let a = analytic[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.checked += 1;
            report.worst_abs = report.worst_abs.max(abs);
            if abs > tol.abs {
                report.worst_rel = report.worst_rel.max(rel);
                if rel > tol.rel {
                    report.failures.push((i, j, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
