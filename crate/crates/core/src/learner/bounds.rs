//! Sample-size formulas and the constants that feed them.
//!
//! These are worst-case bounds. They are evaluated exactly as written and are
//! expected to be many orders of magnitude above what a run actually needs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::filtering::GainMatrix;
use crate::linalg::{self, Matrix};
use crate::system::NoiseConfig;

/// Uniform constants over a sublevel set: resolvent constant `C`, spectral
/// radius bound `ρ` and gain-norm bound `D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlphaConstants {
    pub c: f64,
    pub rho: f64,
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleRequirements {
    pub t_min: u64,
    pub m_min: u64,
    pub t_raw: f64,
    pub m_raw: f64,
    pub gamma_bar: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub s: f64,
    pub s0: f64,
    /// Carried for completeness; the displayed formulas do not use it.
    pub tau: f64,
    pub delta: f64,
}

fn ceil_count(x: f64) -> u64 {
    // Absorb roundoff so that an exact boundary does not round up.
    let y = (x - 1e-9 * x.abs().max(1.0)).ceil();
    if y <= 0.0 {
        0
    } else {
        y as u64
    }
}

/// `γ̄ = 10 (κ_ξ + D κ_ω)⁴ C⁶ ‖H‖² ‖H‖_*`,
/// `ν = 5 C³ ‖H‖² ‖H‖_* (κ_ξ + D κ_ω)² / (1 − √ρ)³`,
/// `T ≥ ln(γ̄ √min(n,m) / s0) / ln(1/√ρ)`,
/// `M ≥ 4 ν² min(n,m) ln(2n/δ) / (s s0)²`.
pub fn sample_requirements(
    constants: AlphaConstants,
    h: &Matrix,
    noise: &NoiseConfig,
    accuracy: Accuracy,
) -> Result<SampleRequirements> {
    let AlphaConstants { c, rho, d } = constants;
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::domain("rho must lie in (0, 1)"));
    }
    if !(c > 0.0 && d >= 0.0) {
        return Err(Error::domain("C must be positive and D nonnegative"));
    }
    let Accuracy { s, s0, delta, .. } = accuracy;
    if !(s > 0.0 && s0 > 0.0) {
        return Err(Error::domain("accuracy levels must be positive"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain("delta must lie in (0, 1)"));
    }
    let (m, n) = h.shape();
    let dmin = n.min(m) as f64;
    let hn = linalg::spectral_norm(h);
    let hnuc = linalg::nuclear_norm(h);
    let kappa = noise.kappa_xi + d * noise.kappa_omega;
    let gamma_bar = 10.0 * kappa.powi(4) * c.powi(6) * hn * hn * hnuc;
    let sq = rho.sqrt();
    let nu = 5.0 * c.powi(3) * hn * hn * hnuc * kappa * kappa / (1.0 - sq).powi(3);
    let t_raw = (gamma_bar * dmin.sqrt() / s0).ln() / (1.0 / sq).ln();
    let m_raw = 4.0 * nu * nu * dmin * (2.0 * n as f64 / delta).ln() / (s * s0).powi(2);
    Ok(SampleRequirements {
        t_min: ceil_count(t_raw),
        m_min: ceil_count(m_raw),
        t_raw,
        m_raw,
        gamma_bar,
        nu,
    })
}

/// Per-gain constants behind the truncation and concentration bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainConstants {
    pub c_l: f64,
    pub rho: f64,
    /// `κ_L = κ_ξ + ‖L‖ κ_ω`.
    pub kappa_l: f64,
    /// `γ̄_L = 10 κ_L⁴ C⁶ ‖H‖² ‖H‖_* / (1 − ρ)²`; truncation bound is `γ̄_L √ρ^{T+1}`.
    pub gamma_bar: f64,
    /// `4 κ_L² C³ ‖H‖² ‖H‖_* / (1 − √ρ)³`.
    pub nu: f64,
    /// `[2 κ_L κ_ω C² + (C + 2 C³ ρ^{3/2}) ‖H‖ κ_L²] ‖HᵀH‖_* / (1 − √ρ)³`.
    pub nu_dimension_free: f64,
    /// `κ_L² C² ‖HᵀH‖_* / (1 − √ρ)²`.
    pub mu: f64,
    /// `C² ‖HᵀH‖_* κ_L² / (1 − ρ)`.
    pub mu_horizon_free: f64,
    /// `(2C + 4 C³ ρ^{3/2}) ‖H‖ ‖HᵀH‖_* κ_L² / (1 − ρ)²`.
    pub nu_horizon_free: f64,
}

impl GainConstants {
    pub fn new(h: &Matrix, gain: &GainMatrix, noise: &NoiseConfig, grid_points: usize) -> Result<Self> {
        let est = linalg::resolvent_constant(gain.closed_loop(), grid_points)?;
        let c = est.c_value;
        let rho = gain.rho();
        let sq = rho.sqrt();
        let hn = linalg::spectral_norm(h);
        let hnuc = linalg::nuclear_norm(h);
        let hth = linalg::nuclear_norm(&(h.transpose() * h));
        let kl = noise.kappa_xi + linalg::spectral_norm(gain.gain()) * noise.kappa_omega;
        let r32 = rho.powf(1.5);
        Ok(Self {
            c_l: c,
            rho,
            kappa_l: kl,
            gamma_bar: 10.0 * kl.powi(4) * c.powi(6) * hn * hn * hnuc / (1.0 - rho).powi(2),
            nu: 4.0 * kl * kl * c.powi(3) * hn * hn * hnuc / (1.0 - sq).powi(3),
            nu_dimension_free: (2.0 * kl * noise.kappa_omega * c * c + (c + 2.0 * c.powi(3) * r32) * hn * kl * kl) * hth
                / (1.0 - sq).powi(3),
            mu: kl * kl * c * c * hth / (1.0 - sq).powi(2),
            mu_horizon_free: c * c * hth * kl * kl / (1.0 - rho),
            nu_horizon_free: (2.0 * c + 4.0 * c.powi(3) * r32) * hn * hth * kl * kl / (1.0 - rho).powi(2),
        })
    }

    pub fn truncation_bound(&self, horizon: usize) -> f64 {
        self.gamma_bar * self.rho.sqrt().powi(horizon as i32 + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::NoiseFamily;
    use approx::assert_relative_eq;

    fn noise() -> NoiseConfig {
        NoiseConfig::new(1.0, 0.5, NoiseFamily::TruncatedGaussian).unwrap()
    }

    fn acc(s0: f64, delta: f64) -> Accuracy {
        Accuracy {
            s: 0.1,
            s0,
            tau: 2.0,
            delta,
        }
    }

    #[test]
    fn boundary_gives_zero_horizon() {
        let h = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let k = AlphaConstants {
            c: 3.0,
            rho: 0.81,
            d: 0.7,
        };
        let probe = sample_requirements(k, &h, &noise(), acc(1.0, 0.1)).unwrap();
        let s0 = probe.gamma_bar; // √min(n, m) = 1
        let req = sample_requirements(k, &h, &noise(), acc(s0, 0.1)).unwrap();
        assert_eq!(req.t_min, 0);
        assert!(req.t_raw.abs() < 1e-12);
    }

    #[test]
    fn delta_scaling_is_logarithmic() {
        let h = Matrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let k = AlphaConstants {
            c: 2.0,
            rho: 0.5,
            d: 1.0,
        };
        let a = sample_requirements(k, &h, &noise(), acc(0.5, 0.1)).unwrap();
        let b = sample_requirements(k, &h, &noise(), acc(0.5, 0.05)).unwrap();
        let ratio = (4.0f64 / 0.05).ln() / (4.0f64 / 0.1).ln();
        assert_relative_eq!(b.m_raw / a.m_raw, ratio, max_relative = 1e-12);
    }

    #[test]
    fn domain_checks() {
        let h = Matrix::from_row_slice(1, 1, &[1.0]);
        let bad = AlphaConstants {
            c: 1.0,
            rho: 1.0,
            d: 0.0,
        };
        assert!(matches!(
            sample_requirements(bad, &h, &noise(), acc(0.1, 0.1)),
            Err(Error::Domain(_))
        ));
    }
}
