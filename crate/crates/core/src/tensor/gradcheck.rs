//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }
}

/// Denominator floor so that gradients that are zero on both sides do not
/// divide by zero.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every element of every input. `build` must construct a scalar loss
/// from the watched inputs and be deterministic.
pub fn grad_check<F>(inputs: &[Tensor<f64>], build: F, eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let params: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detached().into_param()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.watch(p)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |params: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.watch(p)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        tolerance,
    };
    let mut probe = params.clone();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params[i].numel()]);
        for j in 0..params[i].numel() {
            let orig = params[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            report.max_abs_error = report.max_abs_error.max((analytic[j] - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic[j], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_is_exact() {
        let w = Tensor::new([1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::new([3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            &[w, x],
            |tape, v| {
                let y = tape.matmul(v[0], v[1])?;
                Ok(tape.sum(y))
            },
            1e-3,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_abs_error < 1e-10);
        assert_eq!(report.checked, 6);
    }
}
