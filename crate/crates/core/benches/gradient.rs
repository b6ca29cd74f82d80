//! Sequential vs rayon fan-out for the two batch workloads: simulating a
//! batch of trajectories and averaging their stochastic gradients.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kalgain::learner::{initial_gain, GradientKernel, InitStrategy};
use kalgain::par::{self, map_range_sequential};
use kalgain::system::{MassSpring, Simulator};
use kalgain::{NoiseConfig, NoiseFamily, SystemModel};
use std::hint::black_box;

const HORIZON: usize = 50;
const SEED: u64 = 11;

fn setup() -> (SystemModel, NoiseConfig) {
    let model = SystemModel::mass_spring(&MassSpring::default()).unwrap();
    let noise = NoiseConfig::for_model(&model, NoiseFamily::TruncatedGaussian);
    (model, noise)
}

#[cfg(feature = "parallel")]
fn parallel<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    par::map_range_parallel(n, f)
}

#[cfg(not(feature = "parallel"))]
fn parallel<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    par::map_range_sequential(n, f)
}

fn simulate_batch(c: &mut Criterion) {
    let (model, noise) = setup();
    let sim = Simulator::new(&model, noise).unwrap();
    let mut group = c.benchmark_group("simulate_batch");
    for m in [16usize, 128] {
        group.bench_with_input(BenchmarkId::new("sequential", m), &m, |b, &m| {
            b.iter(|| map_range_sequential(m, |i| sim.simulate(HORIZON, kalgain::seed::derive(SEED, i as u64)).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("parallel", m), &m, |b, &m| {
            b.iter(|| parallel(m, |i| sim.simulate(HORIZON, kalgain::seed::derive(SEED, i as u64)).unwrap()))
        });
    }
    group.finish();
}

fn batch_gradient(c: &mut Criterion) {
    let (model, noise) = setup();
    let gain = initial_gain(model.dynamics(), &InitStrategy::surrogate_dare()).unwrap();
    let mut group = c.benchmark_group("batch_gradient");
    for m in [16usize, 128] {
        let batch = kalgain::make_batch(&model, &noise, HORIZON, m, SEED).unwrap();
        let kernel = GradientKernel::new(model.dynamics(), &gain, HORIZON).unwrap();
        group.bench_with_input(BenchmarkId::new("sequential", m), &batch, |b, batch| {
            b.iter(|| {
                let grads = map_range_sequential(batch.len(), |i| kernel.grad(&batch[i]).unwrap());
                black_box(par::pairwise_sum_matrices(&grads))
            })
        });
        group.bench_with_input(BenchmarkId::new("parallel", m), &batch, |b, batch| {
            b.iter(|| {
                let grads = parallel(batch.len(), |i| kernel.grad(&batch[i]).unwrap());
                black_box(par::pairwise_sum_matrices(&grads))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, simulate_batch, batch_gradient);
criterion_main!(benches);
