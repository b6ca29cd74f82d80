//! Kalman recursion, the steady-state gain oracle, and fixed-gain prediction.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::system::{Dynamics, SystemModel, Trajectory};

const RICCATI_MAX_ITERS: usize = 100_000;
const RICCATI_TOL: f64 = 1e-12;

/// A candidate gain `L` with its closed loop `A_L = A − L H` and `ρ(A_L)` cached.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainMatrix {
    gain: Matrix,
    closed_loop: Matrix,
    rho: f64,
}

impl GainMatrix {
    pub fn new(dynamics: &Dynamics, gain: Matrix) -> Result<Self> {
        linalg::ensure_shape(&gain, dynamics.n(), dynamics.m(), "L")?;
        linalg::ensure_finite(&gain, "L")?;
        let closed_loop = &dynamics.a - &gain * &dynamics.h;
        let rho = linalg::spectral_radius(&closed_loop)?;
        Ok(Self {
            gain,
            closed_loop,
            rho,
        })
    }

    pub fn zeros(dynamics: &Dynamics) -> Result<Self> {
        Self::new(dynamics, Matrix::zeros(dynamics.n(), dynamics.m()))
    }

    pub fn gain(&self) -> &Matrix {
        &self.gain
    }

    pub fn closed_loop(&self) -> &Matrix {
        &self.closed_loop
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn is_stabilizing(&self) -> bool {
        linalg::is_schur_stable_radius(self.rho)
    }

    pub fn into_gain(self) -> Matrix {
        self.gain
    }

    pub(crate) fn require_stable(&self, context: &'static str) -> Result<()> {
        if self.is_stabilizing() {
            Ok(())
        } else {
            Err(Error::Instability {
                context,
                rho: self.rho,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub xhat: Vector,
    pub p: Matrix,
    pub t: usize,
}

impl FilterState {
    /// `x̂(0) = m0`, `P(0) = P0`.
    pub fn initial(model: &SystemModel) -> Self {
        Self {
            xhat: model.m0().clone(),
            p: model.p0().clone(),
            t: 0,
        }
    }
}

fn innovation_inverse(model: &SystemModel, p: &Matrix) -> Result<Matrix> {
    let h = model.h();
    let s = linalg::symmetrize(&(h * p * h.transpose() + model.r()));
    s.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("innovation covariance H P Hᵀ + R is singular".into()))
}

/// One step of the time-varying filter in predictor form:
/// `L(t) = A P Hᵀ S⁻¹`, `x̂⁺ = A x̂ + L(t)(y − H x̂)`,
/// `P⁺ = A P Aᵀ + Q − A P Hᵀ S⁻¹ H P Aᵀ`, with `P⁺` symmetrized.
pub fn kf_step(model: &SystemModel, state: &FilterState, y: &Vector) -> Result<FilterState> {
    if y.len() != model.m() {
        return Err(Error::dim(format!("output must have length {}, got {}", model.m(), y.len())));
    }
    linalg::ensure_shape(&state.p, model.n(), model.n(), "P")?;
    let (a, h) = (model.a(), model.h());
    let s_inv = innovation_inverse(model, &state.p)?;
    let aph = a * &state.p * h.transpose();
    let gain = &aph * &s_inv;
    let xhat = a * &state.xhat + &gain * (y - h * &state.xhat);
    let p = a * &state.p * a.transpose() + model.q() - &gain * aph.transpose();
    Ok(FilterState {
        xhat,
        p: linalg::symmetrize(&p),
        t: state.t + 1,
    })
}

fn riccati_update(model: &SystemModel, p: &Matrix) -> Result<(Matrix, Matrix)> {
    let a = model.a();
    let s_inv = innovation_inverse(model, p)?;
    let aph = a * p * model.h().transpose();
    let gain = &aph * &s_inv;
    let next = a * p * a.transpose() + model.q() - &gain * aph.transpose();
    Ok((linalg::symmetrize(&next), gain))
}

/// Iterates the Riccati map from `P0` to its fixed point and returns the
/// steady-state gain together with `P_∞`. Requires `R ≻ 0`.
pub fn steady_state_gain(model: &SystemModel) -> Result<(GainMatrix, Matrix)> {
    if !model.measurement_noise_is_definite() {
        return Err(Error::domain("the steady-state gain needs R positive definite"));
    }
    let mut p = model.p0().clone();
    let mut residual = f64::INFINITY;
    for _ in 0..RICCATI_MAX_ITERS {
        let (next, _) = riccati_update(model, &p)?;
        residual = (&next - &p).norm();
        p = next;
        if residual <= RICCATI_TOL * (1.0 + p.norm()) {
            let (_, gain) = riccati_update(model, &p)?;
            let gain = GainMatrix::new(model.dynamics(), gain)?;
            gain.require_stable("steady-state gain")?;
            return Ok((gain, p));
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::Convergence {
        context: "Riccati iteration",
        iterations: RICCATI_MAX_ITERS,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub yhat: Vector,
    pub error: Vector,
}

/// `ŷ_L(T) = H x̂(T)` with `x̂(t+1) = A_L x̂(t) + L y(t)` and `x̂(0) = 0`.
pub fn fixed_gain_predict(dynamics: &Dynamics, gain: &GainMatrix, traj: &Trajectory) -> Result<Prediction> {
    fixed_gain_predict_from(dynamics, gain, traj, None)
}

/// As [`fixed_gain_predict`] with an explicit initial estimate.
pub fn fixed_gain_predict_from(
    dynamics: &Dynamics,
    gain: &GainMatrix,
    traj: &Trajectory,
    xhat0: Option<&Vector>,
) -> Result<Prediction> {
    let (n, m) = (dynamics.n(), dynamics.m());
    linalg::ensure_shape(gain.gain(), n, m, "L")?;
    if traj.outputs.nrows() != m {
        return Err(Error::dim(format!(
            "trajectory outputs have dimension {}, model expects {m}",
            traj.outputs.nrows()
        )));
    }
    let mut xhat = match xhat0 {
        Some(x) if x.len() != n => {
            return Err(Error::dim(format!("initial estimate must have length {n}")));
        }
        Some(x) => x.clone(),
        None => Vector::zeros(n),
    };
    let horizon = traj.horizon();
    for t in 0..horizon {
        xhat = gain.closed_loop() * &xhat + gain.gain() * traj.outputs.column(t);
    }
    let yhat = &dynamics.h * &xhat;
    let error = traj.outputs.column(horizon) - &yhat;
    Ok(Prediction { yhat, error })
}
