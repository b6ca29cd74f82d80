//! Per-trajectory stochastic gradient of the squared prediction error.

use crate::error::{Error, Result};
use crate::filtering::{fixed_gain_predict, GainMatrix};
use crate::linalg::{self, Matrix};
use crate::par;
use crate::system::{Dynamics, Trajectory};

/// Caches `H A_L^j` and `G_j = H A_L^j L` for `j < T` so each trajectory costs
/// one prediction plus the `O(T²)` double sum.
#[derive(Debug, Clone)]
pub struct GradientKernel<'a> {
    dynamics: &'a Dynamics,
    gain: &'a GainMatrix,
    horizon: usize,
    h_pow: Vec<Matrix>,
    g_pow: Vec<Matrix>,
}

impl<'a> GradientKernel<'a> {
    pub fn new(dynamics: &'a Dynamics, gain: &'a GainMatrix, horizon: usize) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::domain("trajectory horizon must be at least 1"));
        }
        linalg::ensure_shape(gain.gain(), dynamics.n(), dynamics.m(), "L")?;
        let mut h_pow = Vec::with_capacity(horizon);
        let mut cur = dynamics.h.clone();
        for _ in 0..horizon {
            let next = &cur * gain.closed_loop();
            h_pow.push(cur);
            cur = next;
        }
        let g_pow = h_pow.iter().map(|hp| hp * gain.gain()).collect();
        Ok(Self {
            dynamics,
            gain,
            horizon,
            h_pow,
            g_pow,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// With `e = y(T) − ŷ_L(T)`, `u_j = (H A_L^j)ᵀ e` and `G_j = H A_L^j L`:
    ///
    /// `∇ε = −2 Σ_{s=0}^{T−1} u_s y(T−1−s)ᵀ
    ///       + 2 Σ_{t=1}^{T−1} Σ_{k=1}^{t} u_{t−k} (G_{k−1} y(T−t−1))ᵀ`.
    pub fn grad(&self, traj: &Trajectory) -> Result<Matrix> {
        let (n, m) = (self.dynamics.n(), self.dynamics.m());
        let big_t = self.horizon;
        if traj.horizon() != big_t {
            return Err(Error::dim(format!(
                "trajectory horizon {} does not match kernel horizon {big_t}",
                traj.horizon()
            )));
        }
        let e = fixed_gain_predict(self.dynamics, self.gain, traj)?.error;
        let u = Matrix::from_fn(n, big_t, |i, j| self.h_pow[j].column(i).dot(&e));
        let y = &traj.outputs;
        let mut grad = Matrix::zeros(n, m);
        for s in 0..big_t {
            let ys = y.column(big_t - 1 - s);
            for j in 0..m {
                for i in 0..n {
                    grad[(i, j)] -= 2.0 * u[(i, s)] * ys[j];
                }
            }
        }
        let mut v = vec![0.0; m];
        for t in 1..big_t {
            let yt = y.column(big_t - t - 1);
            for k in 1..=t {
                let g = &self.g_pow[k - 1];
                for (r, vr) in v.iter_mut().enumerate() {
                    *vr = (0..m).map(|c| g[(r, c)] * yt[c]).sum();
                }
                let col = t - k;
                for (j, vj) in v.iter().enumerate() {
                    for i in 0..n {
                        grad[(i, j)] += 2.0 * u[(i, col)] * vj;
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// `∇_L ‖y(T) − ŷ_L(T)‖²` for one trajectory. Needs only `(A, H)`, `L` and the data.
pub fn stochastic_grad(dynamics: &Dynamics, gain: &GainMatrix, traj: &Trajectory) -> Result<Matrix> {
    GradientKernel::new(dynamics, gain, traj.horizon())?.grad(traj)
}

/// Mean of [`stochastic_grad`] over the batch, reduced in a fixed pairwise order.
pub fn batch_grad(dynamics: &Dynamics, gain: &GainMatrix, batch: &[Trajectory]) -> Result<Matrix> {
    let first = batch.first().ok_or_else(|| Error::domain("empty batch"))?;
    let kernel = GradientKernel::new(dynamics, gain, first.horizon())?;
    let grads = par::map_range(batch.len(), |i| kernel.grad(&batch[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(par::pairwise_sum_matrices(&grads) / batch.len() as f64)
}
