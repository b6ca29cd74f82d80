//! CSV and JSON artifact writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use kalgain::{Matrix, RunRecord};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_COLUMNS: &str = "iter,J,J_gap,J_gap_normalized,grad_norm,rho,eta_effective,safeguard_flag,wall_ms";
pub const AGGREGATE_COLUMNS: &str = "iter,runs,mean_gap_normalized,stderr_gap_normalized";

/// Shortest round-trip decimal, switching to exponent form for very large or small magnitudes.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e15).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// `(J(L_k) − J*) / (J(L_0) − J*)`.
pub fn normalized_gap(j: f64, j0: f64, jstar: f64) -> f64 {
    (j - jstar) / (j0 - jstar)
}

/// One row per iterate. `J` columns are empty when no oracle cost is available.
pub fn run_csv(record: &RunRecord, jstar: f64, wall_clock: bool) -> String {
    let mut out = String::from(RUN_COLUMNS);
    out.push('\n');
    let j0 = record.costs.first().copied().flatten();
    for k in 0..record.len() {
        let (j, gap, norm) = match (record.costs[k], j0) {
            (Some(j), Some(j0)) => (num(j), num(j - jstar), num(normalized_gap(j, j0, jstar))),
            _ => (String::new(), String::new(), String::new()),
        };
        let wall = if wall_clock {
            num(record.wall_times[k].as_secs_f64() * 1e3)
        } else {
            String::new()
        };
        let _ = writeln!(
            out,
            "{k},{j},{gap},{norm},{},{},{},{},{wall}",
            num(record.grad_norms[k]),
            num(record.rhos[k]),
            num(record.step_sizes[k]),
            u8::from(record.rejected_before(k)),
        );
    }
    out
}

#[derive(Serialize)]
pub struct RunRow {
    pub iter: usize,
    #[serde(rename = "J")]
    pub j: Option<f64>,
    #[serde(rename = "J_gap")]
    pub j_gap: Option<f64>,
    #[serde(rename = "J_gap_normalized")]
    pub j_gap_normalized: Option<f64>,
    pub grad_norm: f64,
    pub rho: f64,
    pub eta_effective: f64,
    pub safeguard_flag: bool,
    pub wall_ms: Option<f64>,
    pub gain: Vec<Vec<f64>>,
}

pub fn run_rows(record: &RunRecord, jstar: f64, wall_clock: bool) -> Vec<RunRow> {
    let j0 = record.costs.first().copied().flatten();
    (0..record.len())
        .map(|k| {
            let j = record.costs[k];
            RunRow {
                iter: k,
                j,
                j_gap: j.map(|j| j - jstar),
                j_gap_normalized: j.zip(j0).map(|(j, j0)| normalized_gap(j, j0, jstar)),
                grad_norm: record.grad_norms[k],
                rho: record.rhos[k],
                eta_effective: record.step_sizes[k],
                safeguard_flag: record.rejected_before(k),
                wall_ms: wall_clock.then(|| record.wall_times[k].as_secs_f64() * 1e3),
                gain: rows(record.iterates[k].gain()),
            }
        })
        .collect()
}

/// Mean and standard error across runs of the normalized gap at each
/// iteration. Runs that ended early contribute only to their own prefix.
pub fn aggregate(curves: &[Vec<f64>]) -> Vec<(usize, f64, f64)> {
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|k| {
            let xs: Vec<f64> = curves.iter().filter_map(|c| c.get(k).copied()).collect();
            let (mean, se) = kalgain::par::mean_and_stderr(&xs);
            (xs.len(), mean, se)
        })
        .collect()
}

pub fn aggregate_csv(agg: &[(usize, f64, f64)]) -> String {
    let mut out = String::from(AGGREGATE_COLUMNS);
    out.push('\n');
    for (k, (runs, mean, se)) in agg.iter().enumerate() {
        let se = if se.is_finite() { num(*se) } else { String::new() };
        let _ = writeln!(out, "{k},{runs},{},{se}", num(*mean));
    }
    out
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}
