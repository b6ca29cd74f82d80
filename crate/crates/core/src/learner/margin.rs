use crate::error::{Error, Result};
use crate::filtering::GainMatrix;
use crate::linalg::{self, Matrix};
use crate::system::Dynamics;

/// Radius `λ_min(Λ) / (2 λ_max(Z) ‖H‖)` with `Z = A_L Z A_Lᵀ + Λ`. Every
/// perturbation of `L` with Frobenius norm at most this keeps `A_L` stable.
pub fn stability_margin(dynamics: &Dynamics, gain: &GainMatrix, lambda: &Matrix) -> Result<f64> {
    gain.require_stable("stability margin")?;
    linalg::ensure_shape(lambda, dynamics.n(), dynamics.n(), "Lambda")?;
    if !linalg::is_symmetric(lambda, 1e-12) {
        return Err(Error::domain("Lambda must be symmetric"));
    }
    let lmin = linalg::lambda_min(lambda);
    if !(lmin > 0.0) {
        return Err(Error::domain("Lambda must be positive definite"));
    }
    let z = linalg::solve_discrete_lyapunov(gain.closed_loop(), lambda)?;
    let hnorm = linalg::spectral_norm(&dynamics.h);
    if hnorm == 0.0 {
        return Err(Error::domain("H is zero"));
    }
    Ok(lmin / (2.0 * linalg::lambda_max(&z) * hnorm))
}
