//! Index-parallel map and order-fixed reductions.
//!
//! With the `parallel` feature (default) [`map_range`] fans out over rayon;
//! without it the same closure runs in a plain loop. Results are collected in
//! index order and reduced with [`pairwise_sum`], so the output is bit-identical
//! for any thread count and for either build.

use nalgebra::DMatrix;

pub fn map_range_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range_parallel<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_range_parallel(n, f)
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_range_sequential(n, f)
}

/// Index-ascending pairwise tree sum.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Pairwise tree sum of equally shaped matrices. Panics on an empty slice.
pub fn pairwise_sum_matrices(xs: &[DMatrix<f64>]) -> DMatrix<f64> {
    match xs.len() {
        0 => panic!("pairwise_sum_matrices on empty slice"),
        1 => xs[0].clone(),
        n => {
            let mid = n / 2;
            pairwise_sum_matrices(&xs[..mid]) + pairwise_sum_matrices(&xs[mid..])
        }
    }
}

/// Mean and standard error of the mean, both with pairwise summation.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
