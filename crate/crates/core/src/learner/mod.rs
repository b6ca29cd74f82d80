//! The data-driven side: stochastic gradients from output data, safeguarded
//! SGD, exact-gradient GD, stability margins and sample-size formulas.
//!
//! Nothing on the update path takes a [`SystemModel`](crate::system::SystemModel):
//! gradients see only [`Dynamics`](crate::system::Dynamics), the gain and trajectories.

mod bounds;
mod gd;
mod gradient;
mod init;
mod margin;
mod sgd;

pub use bounds::{sample_requirements, Accuracy, AlphaConstants, GainConstants, SampleRequirements};
pub use gd::gd_run;
pub use gradient::{batch_grad, stochastic_grad, GradientKernel};
pub use init::{initial_gain, InitStrategy};
pub use margin::stability_margin;
pub use sgd::{sgd_run, RunRecord, Safeguard, SafeguardAction, SafeguardEvent, SgdConfig};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::filtering::{steady_state_gain, GainMatrix};
    use crate::linalg::{self, Matrix};
    use crate::objective::cost_j;
    use crate::system::{Dynamics, MassSpring, NoiseConfig, NoiseFamily, SystemModel};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PHI: f64 = 1.618_033_988_749_895;

    fn s(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_margin() {
        let d = Dynamics::new(s(0.5), s(1.0)).unwrap();
        let g = GainMatrix::zeros(&d).unwrap();
        let margin = stability_margin(&d, &g, &s(1.0)).unwrap();
        assert_relative_eq!(margin, 0.375, epsilon = 1e-14);
        for l in [margin, -margin] {
            assert!(GainMatrix::new(&d, s(l)).unwrap().rho() < 1.0);
        }
    }

    #[test]
    fn margin_with_zero_closed_loop() {
        let h = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let d = Dynamics::new(h.clone(), Matrix::identity(2, 2)).unwrap();
        let g = GainMatrix::new(&d, h).unwrap();
        let margin = stability_margin(&d, &g, &Matrix::identity(2, 2)).unwrap();
        assert_relative_eq!(margin, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn margin_certificate_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Matrix::from_fn(3, 3, |_, _| rng.random_range(-0.6..0.6));
        let h = Matrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let d = Dynamics::new(a, h).unwrap();
        let g = GainMatrix::new(&d, Matrix::from_fn(3, 2, |_, _| rng.random_range(-0.2..0.2))).unwrap();
        assert!(g.is_stabilizing());
        let margin = stability_margin(&d, &g, &Matrix::identity(3, 3)).unwrap();
        for _ in 0..100 {
            let dir = Matrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
            let delta = &dir * (margin / dir.norm());
            assert!(GainMatrix::new(&d, g.gain() + delta).unwrap().rho() < 1.0);
        }
        assert!(matches!(
            stability_margin(&d, &g, &(Matrix::identity(3, 3) * -1.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gd_golden_ratio() {
        let model = SystemModel::new(s(1.0), s(1.0), s(1.0), s(1.0), s(0.0), None).unwrap();
        let l0 = GainMatrix::new(model.dynamics(), s(0.9)).unwrap();
        let rec = gd_run(&model, &l0, 1e-13, 10_000).unwrap();
        assert!((rec.last().unwrap().gain()[(0, 0)] - (PHI - 1.0)).abs() < 1e-9);
        let costs: Vec<f64> = rec.costs.iter().map(|c| c.unwrap()).collect();
        assert!(costs.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn gd_from_optimum_stops_immediately() {
        let model = SystemModel::mass_spring(&MassSpring::default()).unwrap();
        let (lstar, _) = steady_state_gain(&model).unwrap();
        let rec = gd_run(&model, &lstar, 1e-8, 100).unwrap();
        assert_eq!(rec.len(), 1);
    }

    #[test]
    fn gd_mass_spring_from_surrogate() {
        let model = SystemModel::mass_spring(&MassSpring::default()).unwrap();
        let (lstar, _) = steady_state_gain(&model).unwrap();
        let l0 = initial_gain(model.dynamics(), &InitStrategy::surrogate_dare()).unwrap();
        let rec = gd_run(&model, &l0, 1e-10, 100_000).unwrap();
        let err = (rec.last().unwrap().gain() - lstar.gain()).norm();
        assert!(err <= 1e-6 * (1.0 + lstar.gain().norm()), "err {err}");
    }

    #[test]
    fn sgd_on_zero_data_stays_put() {
        let z = s(0.0);
        let model = SystemModel::new(s(0.9), s(1.0), z.clone(), z.clone(), z, None).unwrap();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        let l0 = GainMatrix::new(model.dynamics(), s(0.3)).unwrap();
        let cfg = SgdConfig {
            step_size: 0.1,
            batch_size: 5,
            horizon: 10,
            max_iters: 20,
            ..SgdConfig::default()
        };
        let rec = sgd_run(&model, &noise, &l0, &cfg, None).unwrap();
        assert_eq!(rec.len(), 21);
        assert!(rec.iterates.iter().all(|g| g.gain() == l0.gain()));
        assert!(rec.costs.iter().all(Option::is_none));
    }

    fn mass_spring_start() -> (SystemModel, NoiseConfig, GainMatrix) {
        let model = SystemModel::mass_spring(&MassSpring::default()).unwrap();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        let l0 = initial_gain(
            model.dynamics(),
            &InitStrategy::SurrogateDare {
                process_scale: 1.0,
                measurement_scale: 100.0,
            },
        )
        .unwrap();
        (model, noise, l0)
    }

    #[test]
    fn sgd_reduces_cost_and_is_deterministic() {
        let (model, noise, l0) = mass_spring_start();
        let cfg = SgdConfig {
            step_size: 0.05,
            batch_size: 20,
            horizon: 30,
            max_iters: 60,
            seed: 4,
            ..SgdConfig::default()
        };
        let rec = sgd_run(&model, &noise, &l0, &cfg, Some(&model)).unwrap();
        let again = sgd_run(&model, &noise, &l0, &cfg, Some(&model)).unwrap();
        assert_eq!(rec.iterates, again.iterates);
        assert!(rec.rhos.iter().all(|&r| r < 1.0));
        let first = rec.costs[0].unwrap();
        let last = rec.costs.last().unwrap().unwrap();
        let (lstar, _) = steady_state_gain(&model).unwrap();
        let jstar = cost_j(&model, &lstar).unwrap();
        assert!(last - jstar < 0.5 * (first - jstar));
    }

    #[test]
    fn absurd_step_stalls_cleanly() {
        let (model, noise, l0) = mass_spring_start();
        let cfg = SgdConfig {
            step_size: 1e3,
            batch_size: 10,
            horizon: 20,
            max_iters: 100,
            seed: 1,
            ..SgdConfig::default()
        };
        match sgd_run(&model, &noise, &l0, &cfg, None) {
            Err(Error::Stalled { partial, rejections, .. }) => {
                assert!(rejections > 50);
                assert!(!partial.safeguard_events.is_empty());
                assert!(partial.rhos.iter().all(|&r| r < cfg.target_rho));
            }
            other => panic!("expected stall, got {other:?}"),
        }
        let strict = SgdConfig {
            safeguard: Safeguard::AssertOnly,
            ..cfg
        };
        assert!(matches!(
            sgd_run(&model, &noise, &l0, &strict, None),
            Err(Error::SafeguardTriggered { .. })
        ));
    }

    #[test]
    fn unstable_start_is_domain_error() {
        let model = SystemModel::mass_spring(&MassSpring::default()).unwrap();
        let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
        let l0 = GainMatrix::zeros(model.dynamics()).unwrap();
        assert!(matches!(
            sgd_run(&model, &noise, &l0, &SgdConfig::default(), None),
            Err(Error::Domain(_))
        ));
        assert!(linalg::spectral_radius(model.a()).unwrap() >= 1.0 - 1e-12);
    }
}
