//! Oracle-side costs and gradients.
//!
//! With `F = A_L`, `W = Q + L R Lᵀ` and `C = HᵀH`:
//! `J(L) = tr(C X)` where `X = F X Fᵀ + W`, and `∇J(L) = 2 Y (L R − F X Hᵀ)`
//! where `Y = Fᵀ Y F + C`. The finite-horizon cost `J_T` replaces `X` by the
//! partial sum `F^T P̄0 F^Tᵀ + Σ_{t<T} F^t W F^tᵀ`, with `P̄0 = P0 + m0 m0ᵀ` the
//! second moment of `x(0)` (the predictor starts from zero).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::filtering::{fixed_gain_predict, GainMatrix};
use crate::linalg::{self, Matrix};
use crate::par;
use crate::seed;
use crate::system::{NoiseConfig, Simulator, SystemModel};

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub j: f64,
    pub x: Matrix,
    pub y: Matrix,
    pub grad: Matrix,
}

fn check_gain(model: &SystemModel, gain: &GainMatrix) -> Result<()> {
    linalg::ensure_shape(gain.gain(), model.n(), model.m(), "L")
}

fn weighted_noise(model: &SystemModel, gain: &GainMatrix) -> Matrix {
    let l = gain.gain();
    linalg::symmetrize(&(model.q() + l * model.r() * l.transpose()))
}

fn output_weight(model: &SystemModel) -> Matrix {
    model.h().transpose() * model.h()
}

fn initial_moment(model: &SystemModel) -> Matrix {
    model.p0() + model.m0() * model.m0().transpose()
}

pub fn cost_report(model: &SystemModel, gain: &GainMatrix) -> Result<CostReport> {
    check_gain(model, gain)?;
    gain.require_stable("cost J")?;
    let f = gain.closed_loop();
    let c = output_weight(model);
    let x = linalg::solve_discrete_lyapunov(f, &weighted_noise(model, gain))?;
    let y = linalg::solve_discrete_lyapunov(&f.transpose(), &c)?;
    let j = (&x * &c).trace();
    let grad = gradient_from(model, gain, &x, &y);
    Ok(CostReport { j, x, y, grad })
}

fn gradient_from(model: &SystemModel, gain: &GainMatrix, x: &Matrix, y: &Matrix) -> Matrix {
    let inner = gain.gain() * model.r() - gain.closed_loop() * x * model.h().transpose();
    y * inner * 2.0
}

pub fn cost_j(model: &SystemModel, gain: &GainMatrix) -> Result<f64> {
    check_gain(model, gain)?;
    gain.require_stable("cost J")?;
    let x = linalg::solve_discrete_lyapunov(gain.closed_loop(), &weighted_noise(model, gain))?;
    Ok((x * output_weight(model)).trace())
}

pub fn grad_j(model: &SystemModel, gain: &GainMatrix) -> Result<Matrix> {
    Ok(cost_report(model, gain)?.grad)
}

/// `X_T`; no stability requirement.
pub fn truncated_state_moment(model: &SystemModel, gain: &GainMatrix, horizon: usize) -> Result<Matrix> {
    check_gain(model, gain)?;
    let f = gain.closed_loop();
    let w = weighted_noise(model, gain);
    let mut x = initial_moment(model);
    for _ in 0..horizon {
        x = f * &x * f.transpose() + &w;
    }
    Ok(linalg::symmetrize(&x))
}

/// `tr(X_T HᵀH)`, plus `tr R` when `include_tr_r` is set.
pub fn truncated_cost_j_t(model: &SystemModel, gain: &GainMatrix, horizon: usize, include_tr_r: bool) -> Result<f64> {
    if horizon < 1 {
        return Err(Error::domain("horizon must be at least 1"));
    }
    let x = truncated_state_moment(model, gain, horizon)?;
    let j = (x * output_weight(model)).trace();
    Ok(if include_tr_r { j + model.r().trace() } else { j })
}

/// Closed-form `∇J_T(L)` by differentiating the finite sum term by term:
///
/// `2 Y_T L R − 2 Σ_{t<T} Σ_{k<t} (F^k)ᵀ C F^t W (F^{t−1−k})ᵀ Hᵀ
///  − 2 Σ_{k<T} (F^k)ᵀ C F^T P̄0 (F^{T−1−k})ᵀ Hᵀ`, with `Y_T = Σ_{t<T} (F^t)ᵀ C F^t`.
///
/// Cost is `O(T²)` small products. No stability requirement.
pub fn truncated_grad_j_t(model: &SystemModel, gain: &GainMatrix, horizon: usize) -> Result<Matrix> {
    if horizon < 1 {
        return Err(Error::domain("horizon must be at least 1"));
    }
    check_gain(model, gain)?;
    let f = gain.closed_loop();
    let c = output_weight(model);
    let w = weighted_noise(model, gain);
    let p0 = initial_moment(model);
    let ht = model.h().transpose();
    let pw = linalg::powers(f, horizon);
    // tail[j] = (F^j)ᵀ Hᵀ
    let tail: Vec<Matrix> = pw.iter().map(|p| p.transpose() * &ht).collect();

    let mut y_t = Matrix::zeros(f.nrows(), f.ncols());
    let mut cross = Matrix::zeros(model.n(), model.m());
    for t in 0..horizon {
        let cf = &c * &pw[t];
        y_t += pw[t].transpose() * &cf;
        let cfw = &cf * &w;
        for k in 0..t {
            cross += pw[k].transpose() * &cfw * &tail[t - 1 - k];
        }
    }
    let cfp = &c * &pw[horizon] * &p0;
    for k in 0..horizon {
        cross += pw[k].transpose() * &cfp * &tail[horizon - 1 - k];
    }
    Ok((&y_t * gain.gain() * model.r() - cross) * 2.0)
}

/// `∇J(L) − ∇J_T(L)` computed without subtracting two nearly equal gradients.
///
/// `J − J_T = tr(K D)` with `K = (F^T)ᵀ C F^T` and `D = X − P̄0`, so the gap is
/// `2 Ỹ (L R − F X Hᵀ) − 2 Σ_{k<T} (F^k)ᵀ C F^T D (F^{T−1−k})ᵀ Hᵀ` where
/// `Ỹ = Fᵀ Ỹ F + K`.
pub fn truncation_gap_gradient(model: &SystemModel, gain: &GainMatrix, horizon: usize) -> Result<Matrix> {
    if horizon < 1 {
        return Err(Error::domain("horizon must be at least 1"));
    }
    check_gain(model, gain)?;
    gain.require_stable("truncation gap")?;
    let f = gain.closed_loop();
    let c = output_weight(model);
    let x = linalg::solve_discrete_lyapunov(f, &weighted_noise(model, gain))?;
    let d = &x - initial_moment(model);
    let pw = linalg::powers(f, horizon);
    let ft = &pw[horizon];
    let k = linalg::symmetrize(&(ft.transpose() * &c * ft));
    let y_tilde = linalg::solve_discrete_lyapunov(&f.transpose(), &k)?;
    let lead = gradient_from(model, gain, &x, &y_tilde);
    let ht = model.h().transpose();
    let cfd = &c * ft * &d;
    let mut sum = Matrix::zeros(model.n(), model.m());
    for j in 0..horizon {
        sum += pw[j].transpose() * &cfd * pw[horizon - 1 - j].transpose() * &ht;
    }
    Ok(lead - sum * 2.0)
}

/// Adjoint-side cost for output row `i`: `z(t) = (Fᵀ)^{T−t} H_iᵀ`, `u = Lᵀ z`,
/// `z(0)ᵀ P̄0 z(0) + Σ_{t=1}^{T} zᵀ Q z + uᵀ R u`.
pub fn adjoint_cost(model: &SystemModel, gain: &GainMatrix, horizon: usize, row: usize) -> Result<f64> {
    check_gain(model, gain)?;
    if row >= model.m() {
        return Err(Error::dim(format!("output row {row} out of range")));
    }
    let ft = gain.closed_loop().transpose();
    let p0 = initial_moment(model);
    let mut z = model.h().row(row).transpose();
    let mut total = 0.0;
    // z runs backwards from z(T) = H_iᵀ to z(0).
    for _ in 0..horizon {
        let u = gain.gain().transpose() * &z;
        total += (z.transpose() * model.q() * &z)[(0, 0)] + (u.transpose() * model.r() * &u)[(0, 0)];
        z = &ft * z;
    }
    total += (z.transpose() * p0 * &z)[(0, 0)];
    Ok(total)
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    pub horizon: usize,
    pub samples: usize,
    /// Monte-Carlo mean of `‖y(T) − ŷ_L(T)‖²`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// Sum of adjoint costs plus `tr R`.
    pub rhs: f64,
    pub adjoint_cost_sum: f64,
    pub truncated_cost: f64,
}

impl DualityReport {
    pub fn z_score(&self) -> f64 {
        let diff = (self.lhs - self.rhs).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.lhs_stderr
        }
    }
}

const IDENTITY_TOL: f64 = 1e-10;

/// Closed-form adjoint side against a Monte-Carlo estimate of the prediction
/// error. Fails if the adjoint sum and `J_T + tr R` disagree beyond `1e-10`.
pub fn duality_check(
    model: &SystemModel,
    noise: &NoiseConfig,
    gain: &GainMatrix,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<DualityReport> {
    if horizon < 1 || samples < 1 {
        return Err(Error::domain("duality check needs T >= 1 and at least one sample"));
    }
    let adjoint_cost_sum = (0..model.m())
        .map(|i| adjoint_cost(model, gain, horizon, i))
        .sum::<Result<f64>>()?;
    let rhs = adjoint_cost_sum + model.r().trace();
    let truncated_cost = truncated_cost_j_t(model, gain, horizon, true)?;
    if (rhs - truncated_cost).abs() > IDENTITY_TOL * (1.0 + truncated_cost.abs()) {
        return Err(Error::Numerical(format!(
            "adjoint cost {rhs} differs from the truncated cost {truncated_cost}"
        )));
    }

    let sim = Simulator::new(model, *noise)?;
    let stream = seed::derive(seed, seed::DUALITY_STREAM);
    let errors = par::map_range(samples, |i| -> Result<f64> {
        let traj = sim.simulate(horizon, seed::derive(stream, i as u64))?;
        Ok(fixed_gain_predict(model.dynamics(), gain, &traj)?.error.norm_squared())
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let (lhs, lhs_stderr) = par::mean_and_stderr(&errors);
    Ok(DualityReport {
        horizon,
        samples,
        lhs,
        lhs_stderr: if samples > 1 { lhs_stderr } else { f64::INFINITY },
        rhs,
        adjoint_cost_sum,
        truncated_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::steady_state_gain;
    use crate::system::{MassSpring, NoiseFamily};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn scalar(a: f64, h: f64, q: f64, r: f64, p0: f64) -> SystemModel {
        SystemModel::new(s(a), s(h), s(q), s(r), s(p0), None).unwrap()
    }

    fn gain(model: &SystemModel, l: Matrix) -> GainMatrix {
        GainMatrix::new(model.dynamics(), l).unwrap()
    }

    fn fd_grad(f: impl Fn(&Matrix) -> f64, l: &Matrix) -> Matrix {
        let h = 1e-5 * (1.0 + l.norm());
        Matrix::from_fn(l.nrows(), l.ncols(), |i, j| {
            let mut e = Matrix::zeros(l.nrows(), l.ncols());
            e[(i, j)] = h;
            (-f(&(l + &e * 2.0)) + 8.0 * f(&(l + &e)) - 8.0 * f(&(l - &e)) + f(&(l - &e * 2.0))) / (12.0 * h)
        })
    }

    #[test]
    fn scalar_cost_examples() {
        let model = scalar(0.5, 1.0, 1.0, 1.0, 0.0);
        assert_relative_eq!(cost_j(&model, &gain(&model, s(0.0))).unwrap(), 4.0 / 3.0, epsilon = 1e-14);
        let g = gain(&model, s(0.1));
        assert_relative_eq!(cost_j(&model, &g).unwrap(), 1.01 / 0.84, epsilon = 1e-13);
        let report = cost_report(&model, &g).unwrap();
        assert_relative_eq!(report.y[(0, 0)], 1.0 / 0.84, epsilon = 1e-13);
        // d/dL of (q + L² r)/(1 − (a − L h)²) at L = 0.1
        let closed = 0.2 / 0.84 - 1.01 * 0.8 / (0.84 * 0.84);
        assert_relative_eq!(report.grad[(0, 0)], closed, epsilon = 1e-12);
        assert_relative_eq!(report.grad[(0, 0)], -0.907_029_478_5, epsilon = 1e-10);
    }

    #[test]
    fn unstable_gain_is_rejected() {
        let model = scalar(2.0, 1.0, 1.0, 1.0, 0.0);
        let g = gain(&model, s(0.0));
        assert!(matches!(cost_j(&model, &g), Err(Error::Instability { .. })));
        assert!(matches!(grad_j(&model, &g), Err(Error::Instability { .. })));
        // finite sums do not care
        assert!(truncated_cost_j_t(&model, &g, 5, false).is_ok());
    }

    #[test]
    fn truncated_cost_examples() {
        let model = scalar(0.5, 2.0, 1.0, 0.5, 0.0);
        let g = gain(&model, s(0.3));
        let w = 1.0 + 0.09 * 0.5;
        assert_relative_eq!(truncated_cost_j_t(&model, &g, 1, false).unwrap(), w * 4.0, epsilon = 1e-14);
        assert_relative_eq!(truncated_cost_j_t(&model, &g, 1, true).unwrap(), w * 4.0 + 0.5, epsilon = 1e-14);

        let model = scalar(0.7, 1.5, 0.8, 1.0, 0.0);
        let g = gain(&model, s(0.0));
        for t in [1usize, 4, 13] {
            let closed = 0.8 * (1.0 - 0.49f64.powi(t as i32)) / (1.0 - 0.49) * 2.25;
            assert_relative_eq!(truncated_cost_j_t(&model, &g, t, false).unwrap(), closed, epsilon = 1e-12);
        }
    }

    #[test]
    fn truncated_cost_converges_monotonically() {
        let model = SystemModel::mass_spring(&MassSpring::default()).unwrap();
        let model = model
            .with_covariances(model.q().clone(), model.r().clone(), Matrix::zeros(2, 2))
            .unwrap();
        let g = gain(&model, Matrix::from_row_slice(2, 1, &[0.5, 0.3]));
        let j = cost_j(&model, &g).unwrap();
        let mut prev_gap = f64::INFINITY;
        let mut prev = 0.0;
        for t in [10, 20, 40] {
            let jt = truncated_cost_j_t(&model, &g, t, false).unwrap();
            assert!(jt >= prev && jt <= j);
            assert!(j - jt < prev_gap);
            prev_gap = j - jt;
            prev = jt;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, m) = (3, 2);
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        let h = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let model = SystemModel::new(
            a,
            h,
            &b * b.transpose() + Matrix::identity(n, n) * 0.1,
            Matrix::identity(m, m) * 0.5,
            Matrix::identity(n, n),
            None,
        )
        .unwrap();
        let l = Matrix::from_fn(n, m, |_, _| rng.random_range(-0.1..0.1));
        let analytic = grad_j(&model, &gain(&model, l.clone())).unwrap();
        let fd = fd_grad(|l| cost_j(&model, &gain(&model, l.clone())).unwrap(), &l);
        assert!((&analytic - &fd).norm() <= 1e-7 * analytic.norm(), "{analytic} vs {fd}");

        for t in [1, 3, 12] {
            let analytic = truncated_grad_j_t(&model, &gain(&model, l.clone()), t).unwrap();
            let fd = fd_grad(|l| truncated_cost_j_t(&model, &gain(&model, l.clone()), t, false).unwrap(), &l);
            assert!((&analytic - &fd).norm() <= 1e-7 * (1.0 + analytic.norm()), "T={t}");
        }
    }

    #[test]
    fn optimal_gain_is_stationary() {
        let model = SystemModel::mass_spring(&MassSpring::default()).unwrap();
        let (lstar, _) = steady_state_gain(&model).unwrap();
        assert!(grad_j(&model, &lstar).unwrap().norm() < 1e-8);
        let jstar = cost_j(&model, &lstar).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = Matrix::from_fn(2, 1, |_, _| rng.random_range(-0.2..0.2));
            let g = gain(&model, lstar.gain() + d);
            if g.is_stabilizing() {
                assert!(cost_j(&model, &g).unwrap() >= jstar);
            }
        }
    }

    #[test]
    fn gap_gradient_agrees_with_difference() {
        let model = SystemModel::mass_spring(&MassSpring::default()).unwrap();
        let g = gain(&model, Matrix::from_row_slice(2, 1, &[0.5, 0.3]));
        let full = grad_j(&model, &g).unwrap();
        for t in [1, 5, 20] {
            let gap = truncation_gap_gradient(&model, &g, t).unwrap();
            let diff = &full - truncated_grad_j_t(&model, &g, t).unwrap();
            assert!((gap - diff).norm() < 1e-10 * (1.0 + full.norm()), "T={t}");
        }
    }

    #[test]
    fn scalar_gap_closed_form() {
        // J − J_T = h² a_L^{2T} (W/(1 − a_L²) − p0); differentiate numerically in L.
        let (a, h, q, r, p0) = (0.5, 1.0, 1.0, 1.0, 0.3);
        let model = scalar(a, h, q, r, p0);
        let gap = |l: f64, t: i32| {
            let al = a - l * h;
            h * h * al.powi(2 * t) * ((q + l * l * r) / (1.0 - al * al) - p0)
        };
        for t in [2, 6] {
            let analytic = truncation_gap_gradient(&model, &gain(&model, s(0.25)), t as usize).unwrap()[(0, 0)];
            let fd = fd_grad(|l| gap(l[(0, 0)], t), &s(0.25))[(0, 0)];
            assert_relative_eq!(analytic, fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn adjoint_sum_equals_truncated_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let (n, m) = (3, 2);
            let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-0.6..0.6));
            let h = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let b = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let c = Matrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
            let model = SystemModel::new(
                a,
                h,
                &b * b.transpose(),
                &c * c.transpose() + Matrix::identity(m, m) * 0.1,
                Matrix::identity(n, n) * 0.2,
                None,
            )
            .unwrap();
            let g = gain(&model, Matrix::from_fn(n, m, |_, _| rng.random_range(-0.5..0.5)));
            let horizon = rng.random_range(1..30);
            let adj: f64 = (0..m).map(|i| adjoint_cost(&model, &g, horizon, i).unwrap()).sum();
            let jt = truncated_cost_j_t(&model, &g, horizon, true).unwrap();
            assert!((adj + model.r().trace() - jt).abs() < 1e-10 * (1.0 + jt));
        }
    }

    #[test]
    fn noiseless_duality_is_zero() {
        let z = s(0.0);
        let model = SystemModel::new(s(0.9), s(1.0), z.clone(), z.clone(), z, None).unwrap();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        let rep = duality_check(&model, &noise, &gain(&model, s(0.3)), 10, 50, 1).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.rhs, 0.0);
    }

    #[test]
    fn mass_spring_duality_small_sample() {
        let model = SystemModel::mass_spring(&MassSpring::default()).unwrap();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        let (lstar, _) = steady_state_gain(&model).unwrap();
        let rep = duality_check(&model, &noise, &lstar, 20, 4000, 5).unwrap();
        assert!(rep.z_score() < 4.0, "{rep:?}");
    }
}
