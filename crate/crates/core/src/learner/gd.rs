use std::time::Instant;

use crate::error::{Error, Result};
use crate::filtering::GainMatrix;
use crate::learner::sgd::RunRecord;
use crate::objective::{cost_j, cost_report, grad_j};
use crate::system::SystemModel;

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 80;
const ROUNDOFF_BAND: f64 = 1e-12;

/// Exact-gradient descent with Armijo backtracking from a unit step.
///
/// Candidates that are not Schur stable are treated as failed line-search
/// trials. Stops once `‖∇J‖_F ≤ tol`. Once the Armijo decrease is below the
/// roundoff in `J`, a step is also accepted if `J` does not rise beyond that
/// roundoff band and the gradient norm drops.
pub fn gd_run(model: &SystemModel, l0: &GainMatrix, tol: f64, max_iters: usize) -> Result<RunRecord> {
    if !(tol > 0.0) {
        return Err(Error::domain("gradient tolerance must be positive"));
    }
    if !l0.is_stabilizing() {
        return Err(Error::domain(format!(
            "initial gain is not stabilizing (spectral radius {:.6})",
            l0.rho()
        )));
    }
    let start = Instant::now();
    let dynamics = model.dynamics();
    let mut record = RunRecord::default();
    let mut current = l0.clone();
    let mut report = cost_report(model, &current)?;
    let mut step_in = 0.0;
    for _ in 0..=max_iters {
        let gnorm = report.grad.norm();
        record.push(current.clone(), Some(report.j), gnorm, step_in, start.elapsed());
        if gnorm <= tol {
            return Ok(record);
        }
        let decrease = ARMIJO_C * gnorm * gnorm;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = GainMatrix::new(dynamics, current.gain() - &report.grad * step)?;
            if candidate.is_stabilizing() {
                let j = cost_j(model, &candidate)?;
                let ok = if step * decrease > ROUNDOFF_BAND * report.j.abs() {
                    j <= report.j - step * decrease
                } else {
                    // The required decrease is below the roundoff in J.
                    j <= report.j + ROUNDOFF_BAND * report.j.abs() && grad_j(model, &candidate)?.norm() < gnorm
                };
                if ok {
                    accepted = Some(candidate);
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            return Err(Error::Convergence {
                context: "gradient descent line search",
                iterations: record.len(),
                residual: gnorm,
            });
        };
        current = next;
        report = cost_report(model, &current)?;
        step_in = step;
    }
    Err(Error::Convergence {
        context: "gradient descent",
        iterations: max_iters,
        residual: report.grad.norm(),
    })
}
