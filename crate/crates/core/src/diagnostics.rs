//! Empirical checks of the analysis: the vectorized error identity, decay of
//! the truncation bias in `T`, `1/√M` concentration of batch gradients, and
//! the resolvent power bound.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::filtering::{fixed_gain_predict, GainMatrix};
use crate::learner::{batch_grad, GainConstants, GradientKernel};
use crate::linalg::{self, Matrix, Vector};
use crate::objective;
use crate::par;
use crate::seed;
use crate::system::{Dynamics, NoiseConfig, Simulator, SystemModel, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonReport {
    /// `‖y(T) − ŷ_L(T)‖²` from the predictor.
    pub eps_direct: f64,
    /// `‖H 𝒜 η⃗‖² + 2⟨H 𝒜 η⃗, ω(T)⟩ + ‖ω(T)‖²`.
    pub eps_vectorized: f64,
    /// `‖H 𝒜 η⃗‖² = tr(η⃗ η⃗ᵀ 𝒜ᵀ HᵀH 𝒜)` alone, the error of `H x(T)` without `ω(T)`.
    pub eps_state_form: f64,
}

const EPSILON_TOL: f64 = 1e-10;

/// Rebuilds the prediction error from the simulator's noise record.
///
/// `η⃗ = (ξ(T−1), …, ξ(0), x(0)) − (I ⊗ L)(ω(T−1), …, ω(0), 0)` and
/// `𝒜 = (A_L⁰ … A_L^T)`. The predictor starts at zero, so the state error at
/// time `T` is `𝒜 η⃗` and the output error adds `ω(T)`.
pub fn epsilon_vector_form(dynamics: &Dynamics, gain: &GainMatrix, traj: &Trajectory) -> Result<EpsilonReport> {
    let (Some(noises), Some(states)) = (&traj.noises, &traj.states) else {
        return Err(Error::domain("trajectory carries no noise record"));
    };
    let (n, m) = (dynamics.n(), dynamics.m());
    let big_t = traj.horizon();
    linalg::ensure_shape(&noises.process, n, big_t, "process noise record")?;
    linalg::ensure_shape(&noises.measurement, m, big_t + 1, "measurement noise record")?;

    let mut xi = Vector::zeros(n * (big_t + 1));
    let mut omega = Vector::zeros(m * (big_t + 1));
    for j in 0..big_t {
        let t = big_t - 1 - j;
        xi.rows_mut(j * n, n).copy_from(&noises.process.column(t));
        omega.rows_mut(j * m, m).copy_from(&noises.measurement.column(t));
    }
    xi.rows_mut(big_t * n, n).copy_from(&states.column(0));
    let eye = Matrix::identity(big_t + 1, big_t + 1);
    let eta = xi - eye.kronecker(gain.gain()) * omega;

    let mut script_a = Matrix::zeros(n, n * (big_t + 1));
    let mut pw = Matrix::identity(n, n);
    for j in 0..=big_t {
        script_a.view_mut((0, j * n), (n, n)).copy_from(&pw);
        pw = gain.closed_loop() * pw;
    }
    let weight = script_a.transpose() * dynamics.h.transpose() * &dynamics.h * &script_a;
    let eps_state_form = (eta.transpose() * &weight * &eta)[(0, 0)];
    let state_err = &dynamics.h * &script_a * &eta;
    let w_t = noises.measurement.column(big_t);
    let eps_vectorized = eps_state_form + 2.0 * state_err.dot(&w_t) + w_t.norm_squared();

    let eps_direct = fixed_gain_predict(dynamics, gain, traj)?.error.norm_squared();
    if (eps_direct - eps_vectorized).abs() > EPSILON_TOL * (1.0 + eps_direct) {
        return Err(Error::Diagnostic(format!(
            "vectorized error {eps_vectorized} disagrees with direct error {eps_direct}"
        )));
    }
    Ok(EpsilonReport {
        eps_direct,
        eps_vectorized,
        eps_state_form,
    })
}

/// Least-squares line `y = slope x + intercept` with its `R²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::domain("a line fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = par::pairwise_sum(xs) / n;
    let my = par::pairwise_sum(ys) / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("line fit with constant abscissae"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMethod {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub xs: Vec<f64>,
    pub errors: Vec<f64>,
    /// Slope of `ln error` against `x` (truncation) or `ln x` (concentration).
    pub fitted_slope: f64,
    pub fit_intercept: f64,
    pub fit_r2: f64,
    pub reference_slope: f64,
    /// Conservative bound evaluated at each `x`, when one is available.
    pub bound: Vec<f64>,
    pub method: DecayMethod,
}

fn check_increasing(xs: &[usize], what: &str) -> Result<()> {
    if xs.len() < 3 {
        return Err(Error::domain(format!("{what} needs at least three values")));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) || xs[0] == 0 {
        return Err(Error::domain(format!("{what} must be positive and strictly increasing")));
    }
    Ok(())
}

/// Gaps below this are treated as underflow. The closed-form remainder has no
/// cancellation, so it stays accurate far below machine epsilon.
const CLOSED_FORM_FLOOR: f64 = 1e-250;

fn finish_truncation_report(
    ts: &[usize],
    errors: Vec<f64>,
    floor: f64,
    gain: &GainMatrix,
    bound: Vec<f64>,
    method: DecayMethod,
    monotone_tol: &[f64],
) -> Result<DecayReport> {
    let xs: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let (fx, fy): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .zip(&errors)
        .filter(|(_, &e)| e > floor)
        .map(|(&x, &e)| (x, e.ln()))
        .unzip();
    if fx.len() < 3 {
        return Err(Error::Inconclusive(format!(
            "only {} horizons have a gap above the numerical floor {floor:.1e}",
            fx.len()
        )));
    }
    let fit = linear_fit(&fx, &fy)?;
    if fit.slope >= 0.0 {
        return Err(Error::Diagnostic(format!(
            "truncation gap does not decay (slope {:.4})",
            fit.slope
        )));
    }
    for (i, w) in errors.windows(2).enumerate() {
        if w[1] > w[0] + monotone_tol[i] + monotone_tol[i + 1] && w[0] > floor {
            return Err(Error::Diagnostic(format!(
                "truncation gap grows from T = {} to T = {}",
                ts[i],
                ts[i + 1]
            )));
        }
    }
    Ok(DecayReport {
        xs,
        errors,
        fitted_slope: fit.slope,
        fit_intercept: fit.intercept,
        fit_r2: fit.r2,
        reference_slope: gain.rho().sqrt().ln(),
        bound,
        method,
    })
}

/// `‖∇J − ∇J_T‖` (operator norm) for each `T`, from the closed-form remainder.
pub fn truncation_decay(
    model: &SystemModel,
    noise: &NoiseConfig,
    gain: &GainMatrix,
    t_values: &[usize],
) -> Result<DecayReport> {
    check_increasing(t_values, "truncation sweep")?;
    gain.require_stable("truncation decay")?;
    let errors = t_values
        .iter()
        .map(|&t| objective::truncation_gap_gradient(model, gain, t).map(|g| linalg::spectral_norm(&g)))
        .collect::<Result<Vec<f64>>>()?;
    let constants = GainConstants::new(model.h(), gain, noise, linalg::DEFAULT_RESOLVENT_GRID)?;
    let bound = t_values.iter().map(|&t| constants.truncation_bound(t)).collect();
    let tol: Vec<f64> = errors.iter().map(|e| 1e-10 * e).collect();
    finish_truncation_report(
        t_values,
        errors,
        CLOSED_FORM_FLOOR,
        gain,
        bound,
        DecayMethod::ClosedForm,
        &tol,
    )
}

/// Monte-Carlo variant: `∇J_T` is the mean of stochastic gradients, with the
/// sample count doubled from `initial_samples` until the standard error is
/// below 10% of the measured gap or `max_samples` is reached.
pub fn truncation_decay_mc(
    model: &SystemModel,
    noise: &NoiseConfig,
    gain: &GainMatrix,
    t_values: &[usize],
    initial_samples: usize,
    max_samples: usize,
    seed: u64,
) -> Result<DecayReport> {
    check_increasing(t_values, "truncation sweep")?;
    gain.require_stable("truncation decay")?;
    if initial_samples < 2 || max_samples < initial_samples {
        return Err(Error::domain("sample budget must satisfy 2 <= initial <= max"));
    }
    let full = objective::grad_j(model, gain)?;
    let sim = Simulator::new(model, *noise)?;
    let stream = seed::derive(seed, seed::DIAGNOSTIC_STREAM);
    let mut errors = Vec::new();
    let mut stderrs = Vec::new();
    for (cell, &t) in t_values.iter().enumerate() {
        let kernel = GradientKernel::new(model.dynamics(), gain, t)?;
        let cell_seed = seed::derive(stream, cell as u64);
        let mut grads: Vec<Matrix> = Vec::new();
        let mut target = initial_samples;
        loop {
            let start = grads.len();
            let fresh = par::map_range(target - start, |i| -> Result<Matrix> {
                let traj = sim.simulate(t, seed::derive(cell_seed, (start + i) as u64))?;
                kernel.grad(&traj)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            grads.extend(fresh);
            let count = grads.len() as f64;
            let mean = par::pairwise_sum_matrices(&grads) / count;
            let sq: Vec<Matrix> = grads.iter().map(|g| (g - &mean).map(|v| v * v)).collect();
            let var = par::pairwise_sum_matrices(&sq) / (count - 1.0);
            let stderr = (var / count).map(f64::sqrt).norm();
            let gap = linalg::spectral_norm(&(&mean - &full));
            if stderr < 0.1 * gap {
                errors.push(gap);
                stderrs.push(stderr);
                break;
            }
            if target >= max_samples {
                return Err(Error::Inconclusive(format!(
                    "T = {t}: Monte-Carlo error {stderr:.3e} not separated from gap {gap:.3e} with {target} samples"
                )));
            }
            target = (target * 2).min(max_samples);
        }
    }
    let constants = GainConstants::new(model.h(), gain, noise, linalg::DEFAULT_RESOLVENT_GRID)?;
    let bound = t_values.iter().map(|&t| constants.truncation_bound(t)).collect();
    let tol: Vec<f64> = stderrs.iter().map(|s| 3.0 * s).collect();
    finish_truncation_report(t_values, errors, 0.0, gain, bound, DecayMethod::MonteCarlo, &tol)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub decay: DecayReport,
    /// Standard error of each mean deviation across repetitions.
    pub deviation_stderr: Vec<f64>,
    pub constants: GainConstants,
    /// `ν_L` divided by the empirical deviation at the smallest `M` times `√M`.
    pub nu_ratio: f64,
}

pub const CONCENTRATION_SLOPE_BAND: (f64, f64) = (-0.65, -0.35);

/// For each `M`, `reps` independent batch gradients; records the mean operator
/// norm distance to the mean over every trajectory in the sweep, and fits
/// `ln deviation` against `ln M`. Fails if the slope leaves `[−0.65, −0.35]`.
#[allow(clippy::too_many_arguments)]
pub fn concentration_sweep(
    model: &SystemModel,
    noise: &NoiseConfig,
    gain: &GainMatrix,
    horizon: usize,
    m_values: &[usize],
    reps: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    check_increasing(m_values, "concentration sweep")?;
    if reps < 20 {
        return Err(Error::domain("concentration sweep needs at least 20 repetitions"));
    }
    gain.require_stable("concentration sweep")?;
    let sim = Simulator::new(model, *noise)?;
    let stream = seed::derive(seed, seed::DIAGNOSTIC_STREAM);
    let cells: Vec<(usize, usize)> = (0..m_values.len())
        .flat_map(|c| (0..reps).map(move |r| (c, r)))
        .collect();
    let grads = par::map_range(cells.len(), |i| -> Result<Matrix> {
        let (c, r) = cells[i];
        let cell_seed = seed::derive(seed::derive(stream, c as u64), r as u64);
        let batch = sim.make_batch(horizon, m_values[c], cell_seed)?;
        batch_grad(model.dynamics(), gain, &batch)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let weighted: Vec<Matrix> = grads
        .iter()
        .zip(&cells)
        .map(|(g, &(c, _))| g * m_values[c] as f64)
        .collect();
    let total: usize = m_values.iter().sum::<usize>() * reps;
    let pooled = par::pairwise_sum_matrices(&weighted) / total as f64;

    let mut errors = Vec::new();
    let mut deviation_stderr = Vec::new();
    for c in 0..m_values.len() {
        let devs: Vec<f64> = (0..reps)
            .map(|r| linalg::spectral_norm(&(&grads[c * reps + r] - &pooled)))
            .collect();
        let (mean, se) = par::mean_and_stderr(&devs);
        errors.push(mean);
        deviation_stderr.push(se);
    }
    let xs: Vec<f64> = m_values.iter().map(|&m| m as f64).collect();
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    if ly.iter().any(|v| !v.is_finite()) {
        return Err(Error::Inconclusive("zero deviation: the data carry no noise".into()));
    }
    let fit = linear_fit(&lx, &ly)?;
    let constants = GainConstants::new(model.h(), gain, noise, linalg::DEFAULT_RESOLVENT_GRID)?;
    let bound: Vec<f64> = xs.iter().map(|m| constants.nu / m.sqrt()).collect();
    let report = ConcentrationReport {
        nu_ratio: constants.nu / (errors[0] * xs[0].sqrt()),
        decay: DecayReport {
            xs,
            errors,
            fitted_slope: fit.slope,
            fit_intercept: fit.intercept,
            fit_r2: fit.r2,
            reference_slope: -0.5,
            bound,
            method: DecayMethod::MonteCarlo,
        },
        deviation_stderr,
        constants,
    };
    let (lo, hi) = CONCENTRATION_SLOPE_BAND;
    if !(lo..=hi).contains(&fit.slope) {
        return Err(Error::Diagnostic(format!(
            "concentration slope {:.4} outside [{lo}, {hi}]",
            fit.slope
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerBoundReport {
    pub c_value: f64,
    pub radius: f64,
    pub grid_points: usize,
    /// `‖A_L^k‖ / (C r^{k+1})` for `k = 0..=k_max`.
    pub ratios: Vec<f64>,
    pub worst_ratio: f64,
    pub worst_k: usize,
    pub refined: bool,
}

/// Checks `‖A_L^k‖ ≤ C_L r^{k+1}` for `k ≤ k_max`; on a violation the
/// resolvent grid is doubled once before giving up.
pub fn power_bound_check(gain: &GainMatrix, k_max: usize) -> Result<PowerBoundReport> {
    gain.require_stable("power bound check")?;
    let a = gain.closed_loop();
    let norms: Vec<f64> = linalg::powers(a, k_max).iter().map(linalg::spectral_norm).collect();
    let mut grid = linalg::DEFAULT_RESOLVENT_GRID;
    let mut refined = false;
    loop {
        let est = linalg::resolvent_constant(a, grid)?;
        let ratios: Vec<f64> = norms
            .iter()
            .enumerate()
            .map(|(k, nk)| nk / est.power_bound(k))
            .collect();
        let offending: Vec<usize> = ratios
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 1.0 + 1e-12)
            .map(|(k, _)| k)
            .collect();
        if offending.is_empty() {
            let (worst_k, worst_ratio) = ratios
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, r)| if r > acc.1 { (k, r) } else { acc });
            return Ok(PowerBoundReport {
                c_value: est.c_value,
                radius: est.radius,
                grid_points: est.grid_points,
                ratios,
                worst_ratio,
                worst_k,
                refined,
            });
        }
        if refined {
            return Err(Error::Diagnostic(format!(
                "power bound violated at k = {offending:?} with C = {:.6e}",
                est.c_value
            )));
        }
        refined = true;
        grid = 2 * est.grid_points;
    }
}
