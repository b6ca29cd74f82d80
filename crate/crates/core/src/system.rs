//! Ground-truth model and the bounded-noise trajectory simulator.
//!
//! The simulator is the only consumer of `Q`, `R`, `P0` on the learning path:
//! everything a learner sees is a [`Trajectory`] plus the known [`Dynamics`].

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::par;
use crate::seed;

/// The known part of the model: `x⁺ = A x + ξ`, `y = H x + ω`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dynamics {
    pub a: Matrix,
    pub h: Matrix,
}

impl Dynamics {
    pub fn new(a: Matrix, h: Matrix) -> Result<Self> {
        let n = linalg::ensure_square(&a, "A")?;
        if h.ncols() != n || h.nrows() == 0 {
            return Err(Error::dim(format!(
                "H must be m x {n} with m >= 1, got {}x{}",
                h.nrows(),
                h.ncols()
            )));
        }
        linalg::ensure_finite(&a, "A")?;
        linalg::ensure_finite(&h, "H")?;
        Ok(Self { a, h })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_observable(&self) -> bool {
        linalg::observability_rank(&self.a, &self.h) == self.n()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemModel {
    dynamics: Dynamics,
    q: Matrix,
    r: Matrix,
    p0: Matrix,
    m0: Vector,
}

fn check_psd(m: &Matrix, n: usize, what: &str) -> Result<()> {
    linalg::ensure_shape(m, n, n, what)?;
    linalg::ensure_finite(m, what)?;
    if !linalg::is_symmetric(m, 1e-9) {
        return Err(Error::domain(format!("{what} is not symmetric")));
    }
    let lmin = linalg::lambda_min(m);
    if lmin < -1e-10 * (1.0 + m.norm()) {
        return Err(Error::domain(format!(
            "{what} is not positive semidefinite (min eigenvalue {lmin:.3e})"
        )));
    }
    Ok(())
}

impl SystemModel {
    /// Validates dimensions, symmetry and semidefiniteness, and observability
    /// of `(A, H)`. `R` only needs to be semidefinite here; the Kalman oracle
    /// paths require `R ≻ 0` and check it themselves.
    pub fn new(
        a: Matrix,
        h: Matrix,
        q: Matrix,
        r: Matrix,
        p0: Matrix,
        m0: Option<Vector>,
    ) -> Result<Self> {
        let dynamics = Dynamics::new(a, h)?;
        let (n, m) = (dynamics.n(), dynamics.m());
        check_psd(&q, n, "Q")?;
        check_psd(&r, m, "R")?;
        check_psd(&p0, n, "P0")?;
        let m0 = m0.unwrap_or_else(|| Vector::zeros(n));
        if m0.len() != n {
            return Err(Error::dim(format!("m0 must have length {n}, got {}", m0.len())));
        }
        if m0.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("m0 has non-finite entries"));
        }
        if !dynamics.is_observable() {
            return Err(Error::domain("(A, H) is not observable"));
        }
        if m0.norm() > 0.0 {
            log::warn!("nonzero initial mean: the error-vector identities assume m0 = 0");
        }
        Ok(Self {
            dynamics,
            q: linalg::symmetrize(&q),
            r: linalg::symmetrize(&r),
            p0: linalg::symmetrize(&p0),
            m0,
        })
    }

    /// Same dynamics, different noise covariances.
    pub fn with_covariances(&self, q: Matrix, r: Matrix, p0: Matrix) -> Result<Self> {
        Self::new(
            self.dynamics.a.clone(),
            self.dynamics.h.clone(),
            q,
            r,
            p0,
            Some(self.m0.clone()),
        )
    }

    pub fn mass_spring(params: &MassSpring) -> Result<Self> {
        let (w, dt) = (params.omega, params.dt);
        if !(w > 0.0 && dt > 0.0) {
            return Err(Error::domain("mass-spring omega and dt must be positive"));
        }
        let (c, s) = ((w * dt).cos(), (w * dt).sin());
        let a = Matrix::from_row_slice(2, 2, &[c, s / w, -w * s, c]);
        let h = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        Self::new(
            a,
            h,
            Matrix::identity(2, 2) * params.process_var,
            Matrix::from_element(1, 1, params.measurement_var),
            Matrix::identity(2, 2) * params.initial_var,
            None,
        )
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }
    pub fn a(&self) -> &Matrix {
        &self.dynamics.a
    }
    pub fn h(&self) -> &Matrix {
        &self.dynamics.h
    }
    pub fn q(&self) -> &Matrix {
        &self.q
    }
    pub fn r(&self) -> &Matrix {
        &self.r
    }
    pub fn p0(&self) -> &Matrix {
        &self.p0
    }
    pub fn m0(&self) -> &Vector {
        &self.m0
    }
    pub fn n(&self) -> usize {
        self.dynamics.n()
    }
    pub fn m(&self) -> usize {
        self.dynamics.m()
    }

    pub fn measurement_noise_is_definite(&self) -> bool {
        linalg::lambda_min(&self.r) > 0.0
    }
}

/// Undamped mass-spring oscillator sampled with a zero-order hold, observed in
/// position: `A = [[cos ωΔ, sin ωΔ / ω], [−ω sin ωΔ, cos ωΔ]]`, `H = [1, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassSpring {
    pub omega: f64,
    pub dt: f64,
    pub process_var: f64,
    pub measurement_var: f64,
    pub initial_var: f64,
}

impl Default for MassSpring {
    fn default() -> Self {
        Self {
            omega: 1.0,
            dt: 0.1,
            process_var: 0.1,
            measurement_var: 0.1,
            initial_var: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    /// Gaussian with the model covariance, redrawn until inside the bound.
    #[default]
    TruncatedGaussian,
    /// `B u` with `u` uniform on `[−√3, √3]^k` (unit variance), radially
    /// clipped to the bound if it ever exceeds it.
    ScaledUniform,
}

/// Almost-sure bounds `‖x₀‖, ‖ξ(t)‖ ≤ κ_ξ` and `‖ω(t)‖ ≤ κ_ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub kappa_xi: f64,
    pub kappa_omega: f64,
    pub family: NoiseFamily,
}

/// Bounds default to this many "standard deviations" `sqrt(tr Σ)`.
pub const DEFAULT_KAPPA_SIGMAS: f64 = 6.0;

impl NoiseConfig {
    pub fn new(kappa_xi: f64, kappa_omega: f64, family: NoiseFamily) -> Result<Self> {
        if !(kappa_xi > 0.0 && kappa_omega > 0.0) || !kappa_xi.is_finite() || !kappa_omega.is_finite() {
            return Err(Error::domain("noise bounds must be positive and finite"));
        }
        Ok(Self {
            kappa_xi,
            kappa_omega,
            family,
        })
    }

    /// `κ_ξ = 6 sqrt(max(tr Q, tr P0))`, `κ_ω = 6 sqrt(tr R)`; a zero
    /// covariance gets bound 1 (every draw is zero anyway).
    pub fn for_model(model: &SystemModel, family: NoiseFamily) -> Self {
        let scale = |trace: f64| {
            if trace > 0.0 {
                DEFAULT_KAPPA_SIGMAS * trace.sqrt()
            } else {
                1.0
            }
        };
        let xi = model.q().trace().max(model.p0().trace() + model.m0().norm_squared());
        Self {
            kappa_xi: scale(xi),
            kappa_omega: scale(model.r().trace()),
            family,
        }
    }
}

/// Simulator-side record of every noise draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    /// `ξ(0), …, ξ(T−1)` as columns.
    pub process: Matrix,
    /// `ω(0), …, ω(T)` as columns.
    pub measurement: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `y(0), …, y(T)` as columns of an `m x (T+1)` matrix.
    pub outputs: Matrix,
    /// `x(0), …, x(T)` as columns, when produced by the simulator.
    pub states: Option<Matrix>,
    pub noises: Option<NoiseRecord>,
    pub seed: u64,
}

impl Trajectory {
    /// Output-only trajectory, e.g. loaded from field data.
    pub fn from_outputs(outputs: Matrix) -> Result<Self> {
        if outputs.ncols() < 2 || outputs.nrows() == 0 {
            return Err(Error::domain("a trajectory needs at least two output samples"));
        }
        Ok(Self {
            outputs,
            states: None,
            noises: None,
            seed: 0,
        })
    }

    pub fn horizon(&self) -> usize {
        self.outputs.ncols() - 1
    }

    pub fn output(&self, t: usize) -> Vector {
        self.outputs.column(t).into_owned()
    }

    /// Columns `t, y_1, …, y_m`.
    pub fn to_csv(&self) -> String {
        let m = self.outputs.nrows();
        let mut out = String::from("t");
        for i in 1..=m {
            let _ = write!(out, ",y_{i}");
        }
        out.push('\n');
        for t in 0..self.outputs.ncols() {
            let _ = write!(out, "{t}");
            for i in 0..m {
                let _ = write!(out, ",{}", self.outputs[(i, t)]);
            }
            out.push('\n');
        }
        out
    }
}

const MAX_REDRAWS: usize = 100_000;

/// Trajectory generator with the covariance square roots factored once.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    model: &'a SystemModel,
    noise: NoiseConfig,
    sqrt_q: Matrix,
    sqrt_r: Matrix,
    sqrt_p0: Matrix,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a SystemModel, noise: NoiseConfig) -> Result<Self> {
        NoiseConfig::new(noise.kappa_xi, noise.kappa_omega, noise.family)?;
        if model.m0().norm() > noise.kappa_xi {
            return Err(Error::domain("initial mean lies outside the state noise bound"));
        }
        Ok(Self {
            model,
            noise,
            sqrt_q: linalg::psd_sqrt(model.q())?,
            sqrt_r: linalg::psd_sqrt(model.r())?,
            sqrt_p0: linalg::psd_sqrt(model.p0())?,
        })
    }

    pub fn model(&self) -> &SystemModel {
        self.model
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    /// Draw order: `x(0)`, then for each `t = 0..=T`: `ω(t)` and, if `t < T`, `ξ(t)`.
    pub fn simulate(&self, horizon: usize, seed: u64) -> Result<Trajectory> {
        if horizon < 1 {
            return Err(Error::domain("trajectory horizon must be at least 1"));
        }
        let (n, m) = (self.model.n(), self.model.m());
        let a = self.model.a();
        let h = self.model.h();
        let mut rng = seed::rng(seed);
        let mut states = Matrix::zeros(n, horizon + 1);
        let mut outputs = Matrix::zeros(m, horizon + 1);
        let mut process = Matrix::zeros(n, horizon);
        let mut measurement = Matrix::zeros(m, horizon + 1);
        let mut scratch = vec![0.0; n.max(m)];

        let x0 = self.draw(&mut rng, &self.sqrt_p0, Some(self.model.m0()), self.noise.kappa_xi, &mut scratch)?;
        states.set_column(0, &x0);
        for t in 0..=horizon {
            let w = self.draw(&mut rng, &self.sqrt_r, None, self.noise.kappa_omega, &mut scratch)?;
            let y = h * states.column(t) + &w;
            outputs.set_column(t, &y);
            measurement.set_column(t, &w);
            if t < horizon {
                let xi = self.draw(&mut rng, &self.sqrt_q, None, self.noise.kappa_xi, &mut scratch)?;
                let next = a * states.column(t) + &xi;
                states.set_column(t + 1, &next);
                process.set_column(t, &xi);
            }
        }
        Ok(Trajectory {
            outputs,
            states: Some(states),
            noises: Some(NoiseRecord {
                process,
                measurement,
            }),
            seed,
        })
    }

    /// `count` trajectories; trajectory `i` uses seed `derive(seed, i)`.
    pub fn make_batch(&self, horizon: usize, count: usize, seed: u64) -> Result<Vec<Trajectory>> {
        if count < 1 {
            return Err(Error::domain("batch size must be at least 1"));
        }
        par::map_range(count, |i| self.simulate(horizon, seed::derive(seed, i as u64)))
            .into_iter()
            .collect()
    }

    fn draw(
        &self,
        rng: &mut ChaCha8Rng,
        factor: &Matrix,
        center: Option<&Vector>,
        kappa: f64,
        scratch: &mut [f64],
    ) -> Result<Vector> {
        let k = factor.ncols();
        let base = || center.cloned().unwrap_or_else(|| Vector::zeros(k));
        match self.noise.family {
            NoiseFamily::TruncatedGaussian => {
                for _ in 0..MAX_REDRAWS {
                    for g in scratch[..k].iter_mut() {
                        *g = rng.sample(StandardNormal);
                    }
                    let v = base() + factor * Vector::from_column_slice(&scratch[..k]);
                    if v.norm() <= kappa {
                        return Ok(v);
                    }
                }
                Err(Error::Numerical(format!(
                    "noise bound {kappa} rejects essentially every Gaussian draw"
                )))
            }
            NoiseFamily::ScaledUniform => {
                let half = 3f64.sqrt();
                for u in scratch[..k].iter_mut() {
                    *u = rng.random_range(-half..half);
                }
                let mut v = base() + factor * Vector::from_column_slice(&scratch[..k]);
                let norm = v.norm();
                if norm > kappa {
                    v *= kappa / norm;
                    while v.norm() > kappa {
                        v *= 1.0 - f64::EPSILON;
                    }
                }
                Ok(v)
            }
        }
    }
}

pub fn simulate(model: &SystemModel, noise: &NoiseConfig, horizon: usize, seed: u64) -> Result<Trajectory> {
    Simulator::new(model, *noise)?.simulate(horizon, seed)
}

pub fn make_batch(
    model: &SystemModel,
    noise: &NoiseConfig,
    horizon: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    Simulator::new(model, *noise)?.make_batch(horizon, count, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mass_spring() -> SystemModel {
        SystemModel::mass_spring(&MassSpring::default()).unwrap()
    }

    fn noiseless_scalar() -> SystemModel {
        let z = Matrix::zeros(1, 1);
        SystemModel::new(
            Matrix::from_element(1, 1, 0.9),
            Matrix::from_element(1, 1, 1.0),
            z.clone(),
            z.clone(),
            z,
            None,
        )
        .unwrap()
    }

    #[test]
    fn rejects_unobservable_and_bad_shapes() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let h = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let i2 = Matrix::identity(2, 2);
        let r = Matrix::identity(1, 1);
        assert!(matches!(
            SystemModel::new(a.clone(), h.clone(), i2.clone(), r.clone(), i2.clone(), None),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            SystemModel::new(a, h, Matrix::identity(3, 3), r, i2, None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn noiseless_start_gives_zero_outputs() {
        let model = noiseless_scalar();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        let traj = simulate(&model, &noise, 20, 3).unwrap();
        assert!(traj.outputs.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn horizon_zero_is_rejected() {
        let model = mass_spring();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        assert!(matches!(simulate(&model, &noise, 0, 1), Err(Error::Domain(_))));
        assert!(matches!(make_batch(&model, &noise, 5, 0, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn mass_spring_draws_respect_bounds_and_recorded_identity() {
        let model = mass_spring();
        for family in [NoiseFamily::TruncatedGaussian, NoiseFamily::ScaledUniform] {
            let noise = NoiseConfig::new(0.5, 0.4, family).unwrap();
            let sim = Simulator::new(&model, noise).unwrap();
            for seed in 0..20 {
                let traj = sim.simulate(50, seed).unwrap();
                let rec = traj.noises.as_ref().unwrap();
                let states = traj.states.as_ref().unwrap();
                assert!(states.column(0).norm() <= 0.5);
                assert!(rec.process.column_iter().all(|c| c.norm() <= 0.5));
                assert!(rec.measurement.column_iter().all(|c| c.norm() <= 0.4));
                for t in 0..=50 {
                    let y = model.h() * states.column(t) + rec.measurement.column(t);
                    assert_eq!(y, traj.outputs.column(t).into_owned());
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let model = mass_spring();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        assert_eq!(
            simulate(&model, &noise, 30, 11).unwrap(),
            simulate(&model, &noise, 30, 11).unwrap()
        );
        assert_ne!(
            simulate(&model, &noise, 30, 11).unwrap().outputs,
            simulate(&model, &noise, 30, 12).unwrap().outputs
        );
    }

    #[test]
    fn batch_of_one_reduces_to_simulate() {
        let model = mass_spring();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        let batch = make_batch(&model, &noise, 10, 1, 5).unwrap();
        assert_eq!(batch[0], simulate(&model, &noise, 10, seed::derive(5, 0)).unwrap());
    }

    #[test]
    fn noiseless_batch_is_all_zero() {
        let model = noiseless_scalar();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        let batch = make_batch(&model, &noise, 10, 1000, 5).unwrap();
        assert!(batch.iter().all(|t| t.outputs.iter().all(|&y| y == 0.0)));
    }

    #[test]
    fn batch_members_are_distinct() {
        let model = mass_spring();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        let batch = make_batch(&model, &noise, 10, 50, 9).unwrap();
        for i in 0..batch.len() {
            for j in (i + 1)..batch.len() {
                assert_ne!(batch[i].noises, batch[j].noises);
            }
        }
    }

    #[test]
    fn initial_output_mean_is_centered() {
        // CLT oracle: |mean| within 3 standard errors of zero.
        let model = mass_spring();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        let batch = make_batch(&model, &noise, 1, 100, 2024).unwrap();
        let y0: Vec<f64> = batch.iter().map(|t| t.outputs[(0, 0)]).collect();
        let (mean, se) = par::mean_and_stderr(&y0);
        assert!(mean.abs() <= 3.0 * se, "mean {mean}, stderr {se}");
    }

    #[test]
    fn process_noise_covariance_matches_q() {
        let q = Matrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]);
        let model = mass_spring()
            .with_covariances(q.clone(), Matrix::from_element(1, 1, 0.1), Matrix::identity(2, 2) * 0.05)
            .unwrap();
        let kappa = 10.0 * q.trace().sqrt();
        for family in [NoiseFamily::TruncatedGaussian, NoiseFamily::ScaledUniform] {
            let noise = NoiseConfig::new(kappa, 10.0, family).unwrap();
            let batch = make_batch(&model, &noise, 1000, 100, 77).unwrap();
            let mut cov = Matrix::zeros(2, 2);
            let mut count = 0.0;
            for traj in &batch {
                for c in traj.noises.as_ref().unwrap().process.column_iter() {
                    cov += c * c.transpose();
                    count += 1.0;
                }
            }
            cov /= count;
            assert!((&cov - &q).norm() <= 0.05 * q.norm(), "{family:?}: {cov}");
        }
    }

    #[test]
    fn csv_export_layout() {
        let traj = Trajectory::from_outputs(Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(traj.to_csv(), "t,y_1,y_2\n0,1,3\n1,2,4\n");
    }

    #[test]
    fn default_bounds_are_six_sigma() {
        let model = mass_spring();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        assert_relative_eq!(noise.kappa_xi, 6.0 * 0.2f64.sqrt());
        assert_relative_eq!(noise.kappa_omega, 6.0 * 0.1f64.sqrt());
    }
}
