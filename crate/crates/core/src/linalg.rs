//! Dense small-matrix primitives: spectra, norms, discrete Lyapunov solves and
//! the resolvent constant that bounds powers of a stable matrix.

use nalgebra::linalg::Schur;
use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Radius used for the resolvent contour when the spectral radius is zero.
pub const ZERO_RADIUS_FALLBACK: f64 = 0.5;
pub const DEFAULT_RESOLVENT_GRID: usize = 512;

/// Spectral radii within this distance of 1 count as unstable. Eigenvalues of
/// marginally stable matrices (rotations) come back as `1 ± ulp`.
pub const STABILITY_TOL: f64 = 1e-10;

pub fn is_schur_stable_radius(rho: f64) -> bool {
    rho < 1.0 - STABILITY_TOL
}

const LYAPUNOV_MAX_DOUBLINGS: usize = 200;
const LYAPUNOV_TOL: f64 = 1e-12;
const SCHUR_MAX_SWEEPS: usize = 10_000;

pub fn ensure_square(m: &Matrix, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(format!("{what} has non-finite entries")))
    }
}

pub fn ensure_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::dim(format!(
            "{what} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// All eigenvalues of a square matrix via a real Schur decomposition.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex<f64>>> {
    let n = ensure_square(m, "eigenvalue input")?;
    ensure_finite(m, "eigenvalue input")?;
    match n {
        0 => Ok(Vec::new()),
        1 => Ok(vec![Complex::new(m[(0, 0)], 0.0)]),
        _ => {
            let schur = Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_SWEEPS)
                .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
            Ok(schur.complex_eigenvalues().iter().copied().collect())
        }
    }
}

pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Largest singular value (operator 2-norm).
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn nuclear_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().sum()
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).norm() <= tol * (1.0 + m.norm())
}

/// Eigenvalues of a symmetric matrix, in descending order.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

pub fn lambda_max(m: &Matrix) -> f64 {
    symmetric_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn lambda_min(m: &Matrix) -> f64 {
    symmetric_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Symmetric square root `B = V diag(sqrt(max(λ, 0))) Vᵀ` with eigenpairs in
/// descending order, so the factor is a deterministic function of the input.
pub fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    let n = ensure_square(m, "covariance")?;
    ensure_finite(m, "covariance")?;
    if !is_symmetric(m, 1e-9) {
        return Err(Error::domain("covariance is not symmetric"));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let scale = 1.0 + m.norm();
    let mut b = Matrix::zeros(n, n);
    for &i in &order {
        let lam = eig.eigenvalues[i];
        if lam < -1e-10 * scale {
            return Err(Error::domain(format!(
                "covariance is not positive semidefinite (eigenvalue {lam:.3e})"
            )));
        }
        let v = eig.eigenvectors.column(i);
        b += v * v.transpose() * lam.max(0.0).sqrt();
    }
    Ok(b)
}

pub fn matrix_power(m: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// `[I, M, M², …, M^k]`.
pub fn powers(m: &Matrix, k: usize) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(Matrix::identity(m.nrows(), m.ncols()));
    for j in 1..=k {
        let next = &out[j - 1] * m;
        out.push(next);
    }
    out
}

/// Rank of the n-block observability matrix `[H; HA; …; HA^{n-1}]`.
pub fn observability_rank(a: &Matrix, h: &Matrix) -> usize {
    let n = a.nrows();
    let m = h.nrows();
    let mut obs = Matrix::zeros(n * m, n);
    let mut block = h.clone();
    for i in 0..n {
        obs.view_mut((i * m, 0), (m, n)).copy_from(&block);
        block = &block * a;
    }
    let sv = obs.singular_values();
    let tol = sv.max() * (n * m).max(n) as f64 * f64::EPSILON * 1e3;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Unique `X` with `X = F X Fᵀ + W`, for Schur-stable `F`.
///
/// Doubling iteration: `X ← X + F_k X F_kᵀ`, `F_{k+1} = F_k²`, so after `k`
/// steps `X` holds the first `2^k` terms of `Σ F^t W (Fᵀ)^t`.
pub fn solve_discrete_lyapunov(f: &Matrix, w: &Matrix) -> Result<Matrix> {
    let n = ensure_square(f, "Lyapunov operator")?;
    ensure_shape(w, n, n, "Lyapunov right-hand side")?;
    ensure_finite(w, "Lyapunov right-hand side")?;
    if !is_symmetric(w, 1e-9) {
        return Err(Error::domain("Lyapunov right-hand side is not symmetric"));
    }
    let rho = spectral_radius(f)?;
    if !is_schur_stable_radius(rho) {
        return Err(Error::Instability {
            context: "discrete Lyapunov solve",
            rho,
        });
    }
    let w = symmetrize(w);
    let w_norm = w.norm();
    let mut x = w.clone();
    let mut fk = f.clone();
    for _ in 0..LYAPUNOV_MAX_DOUBLINGS {
        let increment = &fk * &x * fk.transpose();
        let inc_norm = increment.norm();
        x += increment;
        if inc_norm <= f64::EPSILON * x.norm() || !inc_norm.is_finite() {
            break;
        }
        fk = &fk * &fk;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("Lyapunov iteration overflowed".into()));
    }
    let residual = (&x - f * &x * f.transpose() - &w).norm();
    if residual > LYAPUNOV_TOL * (1.0 + w_norm) * (1.0 + x.norm()) {
        return Err(Error::Convergence {
            context: "discrete Lyapunov solve",
            iterations: LYAPUNOV_MAX_DOUBLINGS,
            residual,
        });
    }
    Ok(symmetrize(&x))
}

/// Grid estimate of `max_θ ‖(r e^{iθ} I − A)^{-1}‖` at `r = √ρ(A)`.
#[derive(Debug, Clone, Serialize)]
pub struct ResolventEstimate {
    pub c_value: f64,
    pub radius: f64,
    pub grid_points: usize,
    /// Relative change of the estimate when the grid is doubled.
    pub refinement_change: f64,
}

impl ResolventEstimate {
    /// `C r^{k+1}`, the certified bound on `‖A^k‖`.
    pub fn power_bound(&self, k: usize) -> f64 {
        self.c_value * self.radius.powi(k as i32 + 1)
    }
}

/// Operator 2-norm of `(z I − A)^{-1}`, i.e. `1/σ_min(z I − A)`.
pub fn resolvent_norm(a: &Matrix, z: Complex<f64>) -> f64 {
    let n = a.nrows();
    let shifted = DMatrix::<Complex<f64>>::from_fn(n, n, |i, j| {
        let d = if i == j { z } else { Complex::new(0.0, 0.0) };
        d - Complex::new(a[(i, j)], 0.0)
    });
    let smin = shifted.singular_values().min();
    if smin > 0.0 {
        1.0 / smin
    } else {
        f64::INFINITY
    }
}

fn grid_max(a: &Matrix, radius: f64, points: usize) -> f64 {
    (0..points)
        .map(|j| {
            let theta = std::f64::consts::TAU * j as f64 / points as f64;
            resolvent_norm(a, Complex::from_polar(radius, theta))
        })
        .fold(0.0, f64::max)
}

fn certifies(a: &Matrix, est: &ResolventEstimate, k_max: usize) -> bool {
    let mut pw = Matrix::identity(a.nrows(), a.ncols());
    for k in 0..=k_max {
        if spectral_norm(&pw) > est.power_bound(k) * (1.0 + 1e-12) {
            return false;
        }
        pw = &pw * a;
    }
    true
}

pub fn resolvent_constant(a: &Matrix, grid_points: usize) -> Result<ResolventEstimate> {
    resolvent_constant_with_fallback(a, grid_points, ZERO_RADIUS_FALLBACK)
}

/// The grid is a lower bound of the continuum maximum. The estimate is checked
/// against `‖A^k‖ ≤ C r^{k+1}` for `k ≤ 50` and the grid is doubled (up to four
/// times) until that holds.
pub fn resolvent_constant_with_fallback(
    a: &Matrix,
    grid_points: usize,
    fallback_radius: f64,
) -> Result<ResolventEstimate> {
    ensure_square(a, "closed-loop matrix")?;
    if grid_points < 64 {
        return Err(Error::domain(format!(
            "resolvent grid needs at least 64 points, got {grid_points}"
        )));
    }
    if !(fallback_radius > 0.0 && fallback_radius < 1.0) {
        return Err(Error::domain("fallback radius must lie in (0, 1)"));
    }
    let rho = spectral_radius(a)?;
    if !is_schur_stable_radius(rho) {
        return Err(Error::Instability {
            context: "resolvent constant",
            rho,
        });
    }
    let radius = if rho > 1e-12 { rho.sqrt() } else { fallback_radius };

    let mut points = grid_points;
    let mut c = grid_max(a, radius, points);
    for _ in 0..=4 {
        let refined = grid_max(a, radius, 2 * points);
        let change = (refined - c).abs() / c;
        if change >= 0.01 {
            log::warn!(
                "resolvent constant moved by {:.2}% when refining the grid from {} to {} points",
                100.0 * change,
                points,
                2 * points
            );
        }
        let est = ResolventEstimate {
            c_value: c,
            radius,
            grid_points: points,
            refinement_change: change,
        };
        if certifies(a, &est, 50) {
            return Ok(est);
        }
        points *= 2;
        c = refined;
    }
    Err(Error::Numerical(format!(
        "resolvent grid of {points} points does not certify the power bound"
    )))
}
