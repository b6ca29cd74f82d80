use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::GainMatrix;
use crate::learner::gradient::batch_grad;
use crate::linalg::Matrix;
use crate::objective::cost_j;
use crate::seed;
use crate::system::{NoiseConfig, Simulator, SystemModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Safeguard {
    /// Reject a step that leaves `ρ(A_L) < target_rho` and retry with half the step.
    #[default]
    RejectAndShrink,
    /// Abort the run on the first such step.
    AssertOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub step_size: f64,
    pub batch_size: usize,
    pub horizon: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub safeguard: Safeguard,
    pub target_rho: f64,
    /// Rejections allowed since the last full-size accepted step.
    pub max_rejections: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            batch_size: 100,
            horizon: 50,
            max_iters: 500,
            seed: 0,
            safeguard: Safeguard::RejectAndShrink,
            target_rho: 0.995,
            max_rejections: 50,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::domain("step size must be positive and finite"));
        }
        if self.batch_size < 1 || self.horizon < 1 || self.max_iters < 1 {
            return Err(Error::domain("batch size, horizon and iteration count must be at least 1"));
        }
        if !(self.target_rho > 0.0 && self.target_rho < 1.0) {
            return Err(Error::domain("target spectral radius must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum SafeguardAction {
    Rejected { rho: f64, step: f64 },
    Aborted { rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SafeguardEvent {
    /// Index of the iterate the rejected step started from.
    pub iteration: usize,
    #[serde(flatten)]
    pub action: SafeguardAction,
}

/// One row per iterate `L_0, …, L_K`.
///
/// `grad_norms[k]` is the norm of the gradient evaluated at `L_k`;
/// `step_sizes[k]` is the step that produced `L_k` (zero for `k = 0`).
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunRecord {
    pub iterates: Vec<GainMatrix>,
    /// Oracle `J(L_k)`, when an oracle model was supplied.
    pub costs: Vec<Option<f64>>,
    pub grad_norms: Vec<f64>,
    pub rhos: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub safeguard_events: Vec<SafeguardEvent>,
    pub wall_times: Vec<Duration>,
}

impl RunRecord {
    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn last(&self) -> Option<&GainMatrix> {
        self.iterates.last()
    }

    /// Whether any step into iterate `k` was preceded by a rejection.
    pub fn rejected_before(&self, k: usize) -> bool {
        k > 0 && self.safeguard_events.iter().any(|e| e.iteration + 1 == k)
    }

    pub(crate) fn push(&mut self, gain: GainMatrix, cost: Option<f64>, grad_norm: f64, step: f64, elapsed: Duration) {
        self.rhos.push(gain.rho());
        self.iterates.push(gain);
        self.costs.push(cost);
        self.grad_norms.push(grad_norm);
        self.step_sizes.push(step);
        self.wall_times.push(elapsed);
    }
}

/// Safeguarded SGD on the batch prediction error.
///
/// Iteration `k` draws a fresh batch with seed `derive(derive(cfg.seed, SGD_STREAM), k)`
/// and proposes `L − η ∇Ĵ_T(L)`. Proposals with `ρ ≥ target_rho` are rejected and
/// retried at half the step on the same gradient. The counter of rejections is
/// reset only by a step accepted at the full configured size, so repeated
/// shrink-and-accept cycles still end in [`Error::Stalled`].
///
/// The oracle model, if given, is only used to log `J(L_k)`.
pub fn sgd_run(
    model_sim: &SystemModel,
    noise: &NoiseConfig,
    l0: &GainMatrix,
    cfg: &SgdConfig,
    oracle: Option<&SystemModel>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let dynamics = model_sim.dynamics();
    if !l0.is_stabilizing() {
        return Err(Error::domain(format!(
            "initial gain is not stabilizing (spectral radius {:.6})",
            l0.rho()
        )));
    }
    if l0.rho() >= cfg.target_rho {
        log::warn!(
            "initial spectral radius {:.6} is above the safeguard target {:.6}",
            l0.rho(),
            cfg.target_rho
        );
    }
    let sim = Simulator::new(model_sim, *noise)?;
    let stream = seed::derive(cfg.seed, seed::SGD_STREAM);
    let log_cost = |g: &GainMatrix| -> Result<Option<f64>> { oracle.map(|o| cost_j(o, g)).transpose() };
    let gradient_at = |g: &GainMatrix, k: usize| -> Result<Matrix> {
        let batch = sim.make_batch(cfg.horizon, cfg.batch_size, seed::derive(stream, k as u64))?;
        batch_grad(dynamics, g, &batch)
    };

    let start = Instant::now();
    let mut record = RunRecord::default();
    let mut current = l0.clone();
    let mut grad = gradient_at(&current, 0)?;
    record.push(current.clone(), log_cost(&current)?, grad.norm(), 0.0, start.elapsed());
    let mut rejections = 0usize;

    for k in 0..cfg.max_iters {
        let mut step = cfg.step_size;
        let next = loop {
            let candidate = GainMatrix::new(dynamics, current.gain() - &grad * step);
            let rho = match &candidate {
                Ok(c) => c.rho(),
                Err(_) => f64::INFINITY,
            };
            if rho < cfg.target_rho {
                break candidate?;
            }
            match cfg.safeguard {
                Safeguard::AssertOnly => {
                    record.safeguard_events.push(SafeguardEvent {
                        iteration: k,
                        action: SafeguardAction::Aborted { rho },
                    });
                    return Err(Error::SafeguardTriggered {
                        iteration: k,
                        rho,
                        target: cfg.target_rho,
                    });
                }
                Safeguard::RejectAndShrink => {
                    record.safeguard_events.push(SafeguardEvent {
                        iteration: k,
                        action: SafeguardAction::Rejected { rho, step },
                    });
                    rejections += 1;
                    if rejections > cfg.max_rejections {
                        return Err(Error::Stalled {
                            iteration: k,
                            rejections,
                            partial: Box::new(record),
                        });
                    }
                    step *= 0.5;
                }
            }
        };
        if step == cfg.step_size {
            rejections = 0;
        }
        current = next;
        grad = gradient_at(&current, k + 1)?;
        record.push(current.clone(), log_cost(&current)?, grad.norm(), step, start.elapsed());
    }
    Ok(record)
}
