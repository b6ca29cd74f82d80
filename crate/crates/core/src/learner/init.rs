use crate::error::{Error, Result};
use crate::filtering::{steady_state_gain, GainMatrix};
use crate::linalg::{self, Matrix};
use crate::system::{Dynamics, SystemModel};

/// How to pick `L_0`. None of these use the true noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// Steady-state gain for placeholder covariances `Q = q I`, `R = r I`.
    SurrogateDare { process_scale: f64, measurement_scale: f64 },
    /// `L = 0`, valid only when `A` is already stable.
    ZeroIfStable,
    User(Matrix),
}

impl InitStrategy {
    pub fn surrogate_dare() -> Self {
        Self::SurrogateDare {
            process_scale: 1.0,
            measurement_scale: 1.0,
        }
    }
}

pub fn initial_gain(dynamics: &Dynamics, strategy: &InitStrategy) -> Result<GainMatrix> {
    if !dynamics.is_observable() {
        return Err(Error::domain("(A, H) is not observable"));
    }
    let (n, m) = (dynamics.n(), dynamics.m());
    let gain = match strategy {
        InitStrategy::SurrogateDare {
            process_scale,
            measurement_scale,
        } => {
            if !(*process_scale > 0.0 && *measurement_scale > 0.0) {
                return Err(Error::domain("surrogate covariance scales must be positive"));
            }
            let surrogate = SystemModel::new(
                dynamics.a.clone(),
                dynamics.h.clone(),
                Matrix::identity(n, n) * *process_scale,
                Matrix::identity(m, m) * *measurement_scale,
                Matrix::identity(n, n),
                None,
            )?;
            steady_state_gain(&surrogate)
                .map_err(|e| Error::Initialization(format!("surrogate Riccati solve failed: {e}")))?
                .0
        }
        InitStrategy::ZeroIfStable => {
            let rho = linalg::spectral_radius(&dynamics.a)?;
            if !linalg::is_schur_stable_radius(rho) {
                return Err(Error::Initialization(format!(
                    "A is not stable (spectral radius {rho:.6}), zero gain is not admissible"
                )));
            }
            GainMatrix::zeros(dynamics)?
        }
        InitStrategy::User(l) => GainMatrix::new(dynamics, l.clone())?,
    };
    if !gain.is_stabilizing() {
        return Err(Error::Initialization(format!(
            "gain is not stabilizing (spectral radius {:.6})",
            gain.rho()
        )));
    }
    Ok(gain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::MassSpring;

    #[test]
    fn zero_for_stable_a() {
        let d = Dynamics::new(Matrix::from_element(1, 1, 0.5), Matrix::from_element(1, 1, 1.0)).unwrap();
        let g = initial_gain(&d, &InitStrategy::ZeroIfStable).unwrap();
        assert_eq!(g.gain(), &Matrix::zeros(1, 1));
    }

    #[test]
    fn surrogate_stabilizes_mass_spring() {
        let model = SystemModel::mass_spring(&MassSpring::default()).unwrap();
        assert!((linalg::spectral_radius(model.a()).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            initial_gain(model.dynamics(), &InitStrategy::ZeroIfStable),
            Err(Error::Initialization(_))
        ));
        let g = initial_gain(model.dynamics(), &InitStrategy::surrogate_dare()).unwrap();
        assert!(g.rho() < 1.0);
        let g = initial_gain(
            model.dynamics(),
            &InitStrategy::SurrogateDare {
                process_scale: 1.0,
                measurement_scale: 100.0,
            },
        )
        .unwrap();
        assert!(g.rho() < 1.0);
    }

    #[test]
    fn unstable_user_gain_is_rejected() {
        let d = Dynamics::new(Matrix::from_element(1, 1, 0.5), Matrix::from_element(1, 1, 1.0)).unwrap();
        assert!(matches!(
            initial_gain(&d, &InitStrategy::User(Matrix::from_element(1, 1, 2.0))),
            Err(Error::Initialization(_))
        ));
    }
}
