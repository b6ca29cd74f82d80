use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _, Result};
use kalgain::diagnostics::{concentration_sweep, epsilon_vector_form, power_bound_check, truncation_decay};
use kalgain::objective::duality_check;
use kalgain::system::Simulator;
use kalgain::{
    cost_j, gd_run, initial_gain, seed, sgd_run, steady_state_gain, Error, GainMatrix, NoiseConfig,
    RunRecord, SystemModel,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Check, ConfigError, ExperimentConfig, Format, GainChoice, Method};
use crate::output::{self, num, rows};

pub const NORMALIZED_GAP: &str = "(J(L_k) - J(L*)) / (J(L_0) - J(L*))";
pub const SEED_DERIVATION: &str = "derive(parent, stream) = splitmix64(parent ^ splitmix64(stream + 0x9E3779B97F4A7C15)); \
     SGD iteration k of run seed s draws its batch with derive(derive(s, 0x53474400), k); \
     trajectory i of a batch with seed b uses derive(b, i)";

/// Everything a subcommand needs besides its own flags.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub source: String,
    pub config_sha256: String,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub samples: Option<usize>,
    pub quiet: bool,
}

struct Setup {
    model: SystemModel,
    noise: NoiseConfig,
    l0: GainMatrix,
    oracle: Oracle,
}

#[derive(Serialize)]
pub struct Oracle {
    #[serde(rename = "L_star")]
    l_star: Vec<Vec<f64>>,
    #[serde(rename = "P_inf")]
    p_inf: Vec<Vec<f64>>,
    rho: f64,
    #[serde(rename = "J_star")]
    j_star: f64,
    #[serde(skip)]
    gain: Option<GainMatrix>,
}

fn oracle_of(model: &SystemModel) -> Result<Oracle> {
    let (gain, p) = steady_state_gain(model).context("optimal gain")?;
    let j_star = cost_j(model, &gain)?;
    Ok(Oracle {
        l_star: rows(gain.gain()),
        p_inf: rows(&p),
        rho: gain.rho(),
        j_star,
        gain: Some(gain),
    })
}

impl Context {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(&self.cfg.output.directory))
    }

    fn formats(&self) -> Vec<Format> {
        match self.format {
            Some(f) => vec![f],
            None => self.cfg.output.formats.clone(),
        }
    }

    fn first_seed(&self) -> u64 {
        self.seed.unwrap_or(self.cfg.sweep.seeds[0])
    }

    fn seeds(&self) -> Vec<u64> {
        match self.seed {
            Some(s) => vec![s],
            None => self.cfg.sweep.seeds.clone(),
        }
    }

    fn model_and_noise(&self) -> Result<(SystemModel, NoiseConfig)> {
        let model = self.cfg.system_model()?;
        let noise = self.cfg.noise_config(&model)?;
        Ok((model, noise))
    }

    fn setup(&self) -> Result<Setup> {
        let (model, noise) = self.model_and_noise()?;
        let l0 = initial_gain(model.dynamics(), &self.cfg.init_strategy()?)
            .map_err(|e| ConfigError(format!("learner.init: {e}")))?;
        let oracle = oracle_of(&model)?;
        Ok(Setup {
            model,
            noise,
            l0,
            oracle,
        })
    }

    fn metadata(&self, command: &str, setup: &Setup, seeds: &[u64]) -> Result<Value> {
        let j0 = cost_j(&setup.model, &setup.l0)?;
        Ok(json!({
            "tool": "kalgain",
            "version": kalgain::VERSION,
            "command": command,
            "config_source": self.source,
            "config_sha256": self.config_sha256,
            "seeds": seeds,
            "seed_derivation": SEED_DERIVATION,
            "normalized_gap": NORMALIZED_GAP,
            "method": match self.cfg.learner.method { Method::Sgd => "sgd", Method::Gd => "gd" },
            "learner": self.cfg.sgd_config(0, None, None),
            "noise": setup.noise,
            "oracle": setup.oracle,
            "initial": { "L0": rows(setup.l0.gain()), "J0": j0, "rho": setup.l0.rho() },
        }))
    }
}

/// Outcome of a single learning run; a stall still yields the accepted prefix.
struct RunOutcome {
    record: RunRecord,
    status: String,
}

fn run_one(ctx: &Context, setup: &Setup, seed: u64, batch: usize, horizon: usize) -> Result<RunOutcome> {
    let cfg = ctx.cfg.sgd_config(seed, Some(batch), Some(horizon));
    let result = match ctx.cfg.learner.method {
        Method::Sgd => sgd_run(&setup.model, &setup.noise, &setup.l0, &cfg, Some(&setup.model)),
        Method::Gd => gd_run(&setup.model, &setup.l0, ctx.cfg.learner.gd_tolerance, cfg.max_iters),
    };
    match result {
        Ok(record) => Ok(RunOutcome {
            record,
            status: "ok".into(),
        }),
        Err(Error::Stalled {
            iteration,
            rejections,
            partial,
        }) => Ok(RunOutcome {
            record: *partial,
            status: format!("stalled at iteration {iteration} after {rejections} rejections"),
        }),
        Err(e) => Err(e.into()),
    }
}

fn write_run(ctx: &Context, dir: &Path, stem: &str, record: &RunRecord, jstar: f64) -> Result<Vec<String>> {
    let wall = ctx.cfg.output.wall_clock;
    let mut files = Vec::new();
    for format in ctx.formats() {
        let name = match format {
            Format::Csv => {
                let name = format!("{stem}.csv");
                output::write(&dir.join(&name), &output::run_csv(record, jstar, wall))?;
                name
            }
            Format::Json => {
                let name = format!("{stem}.json");
                output::write_json(&dir.join(&name), &output::run_rows(record, jstar, wall))?;
                name
            }
        };
        files.push(name);
    }
    Ok(files)
}

fn final_gap(record: &RunRecord, jstar: f64) -> Option<f64> {
    let j0 = record.costs.first().copied().flatten()?;
    let j = record.costs.last().copied().flatten()?;
    Some(output::normalized_gap(j, j0, jstar))
}

pub fn oracle(ctx: &Context) -> Result<()> {
    let (model, _) = ctx.model_and_noise()?;
    let oracle = oracle_of(&model)?;
    if let Some(dir) = &ctx.out {
        output::write_json(&dir.join("oracle.json"), &oracle)?;
    }
    println!("{}", serde_json::to_string_pretty(&oracle)?);
    Ok(())
}

pub fn learn(ctx: &Context) -> Result<()> {
    let setup = ctx.setup()?;
    let seed = ctx.first_seed();
    let dir = ctx.out_dir();
    let (batch, horizon) = (ctx.cfg.learner.batch_size, ctx.cfg.learner.horizon);
    ctx.progress(format!("learn: M={batch} T={horizon} seed={seed} -> {}", dir.display()));
    let run = run_one(ctx, &setup, seed, batch, horizon)?;
    let jstar = setup.oracle.j_star;
    let stem = format!("run_seed{seed}");
    let files = write_run(ctx, &dir, &stem, &run.record, jstar)?;
    let mut meta = ctx.metadata("learn", &setup, &[seed])?;
    meta["runs"] = json!([{
        "seed": seed,
        "batch_size": batch,
        "horizon": horizon,
        "files": files,
        "status": run.status,
        "iterations": run.record.len().saturating_sub(1),
        "final_gap_normalized": final_gap(&run.record, jstar),
        "final_gain": run.record.last().map(|g| rows(g.gain())),
    }]);
    output::write_json(&dir.join("metadata.json"), &meta)?;
    let gap = final_gap(&run.record, jstar).map_or_else(|| "n/a".into(), num);
    ctx.progress(format!("learn: {} after {} iterations, normalized gap {gap}", run.status, run.record.len() - 1));
    if run.status != "ok" {
        return Err(anyhow!("learning run {}", run.status));
    }
    Ok(())
}

pub fn experiment(ctx: &Context) -> Result<()> {
    let setup = ctx.setup()?;
    let seeds = ctx.seeds();
    let dir = ctx.out_dir();
    let jstar = setup.oracle.j_star;
    let mut cells = Vec::new();
    let mut failures = 0usize;
    for (batch, horizon) in ctx.cfg.cells() {
        let cell_name = format!("M{batch}_T{horizon}");
        let cell_dir = dir.join(&cell_name);
        ctx.progress(format!("experiment: cell {cell_name}, {} seeds", seeds.len()));
        let mut runs = Vec::new();
        let mut curves = Vec::new();
        for &seed in &seeds {
            let run = run_one(ctx, &setup, seed, batch, horizon)?;
            let files = write_run(ctx, &cell_dir, &format!("seed{seed}"), &run.record, jstar)?;
            if run.status != "ok" {
                failures += 1;
                ctx.progress(format!("experiment: {cell_name} seed {seed} {}", run.status));
            }
            let j0 = run.record.costs[0].unwrap_or(f64::NAN);
            curves.push(
                run.record
                    .costs
                    .iter()
                    .map(|c| output::normalized_gap(c.unwrap_or(f64::NAN), j0, jstar))
                    .collect::<Vec<f64>>(),
            );
            runs.push(json!({
                "seed": seed,
                "files": files,
                "status": run.status,
                "iterations": run.record.len().saturating_sub(1),
                "final_gap_normalized": final_gap(&run.record, jstar),
            }));
        }
        let agg = output::aggregate(&curves);
        output::write(&cell_dir.join("aggregate.csv"), &output::aggregate_csv(&agg))?;
        let tail = &agg[agg.len().saturating_sub(100)..];
        let plateau = tail.iter().map(|a| a.1).sum::<f64>() / tail.len() as f64;
        ctx.progress(format!("experiment: {cell_name} plateau {}", num(plateau)));
        cells.push(json!({
            "batch_size": batch,
            "horizon": horizon,
            "directory": cell_name,
            "aggregate": format!("{cell_name}/aggregate.csv"),
            "plateau_gap_normalized": plateau,
            "runs": runs,
        }));
    }
    let mut meta = ctx.metadata("experiment", &setup, &seeds)?;
    meta["cells"] = Value::Array(cells);
    output::write_json(&dir.join("metadata.json"), &meta)?;
    if failures > 0 {
        return Err(anyhow!("{failures} run(s) stalled; partial records were written"));
    }
    Ok(())
}

pub fn duality(ctx: &Context) -> Result<()> {
    let setup = ctx.setup()?;
    let d = &ctx.cfg.diagnostics;
    let gain = pick_gain(&setup, d.gain);
    let samples = ctx.samples.unwrap_or(d.duality_samples);
    let rep = duality_check(&setup.model, &setup.noise, gain, d.duality_horizon, samples, ctx.first_seed())?;
    let value = json!({ "report": rep, "z_score": rep.z_score(), "seed": ctx.first_seed() });
    if let Some(dir) = &ctx.out {
        output::write_json(&dir.join("duality.json"), &value)?;
    }
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn pick_gain(setup: &Setup, choice: GainChoice) -> &GainMatrix {
    match choice {
        GainChoice::Optimal => setup.oracle.gain.as_ref().expect("oracle gain"),
        GainChoice::Initial => &setup.l0,
    }
}

fn check_entry(check: Check, result: Result<Value>) -> (bool, Value) {
    match result {
        Ok(report) => (true, json!({ "check": check, "status": "pass", "report": report })),
        Err(e) => (false, json!({ "check": check, "status": "fail", "message": format!("{e:#}") })),
    }
}

pub fn diagnose(ctx: &Context) -> Result<()> {
    let setup = ctx.setup()?;
    let d = &ctx.cfg.diagnostics;
    let dir = ctx.out_dir();
    let seed = ctx.first_seed();
    let gain = pick_gain(&setup, d.gain);
    let (model, noise) = (&setup.model, &setup.noise);
    let mut entries = Vec::new();
    let mut failed = 0;
    for &check in &d.checks {
        ctx.progress(format!("diagnose: {check:?}"));
        let result: Result<Value> = match check {
            Check::TruncationDecay => truncation_decay(model, noise, gain, &d.truncation_horizons)
                .map_err(Into::into)
                .and_then(|rep| {
                    let mut csv = String::from("T,gap_norm,bound\n");
                    for ((t, e), b) in rep.xs.iter().zip(&rep.errors).zip(&rep.bound) {
                        csv.push_str(&format!("{t},{},{}\n", num(*e), num(*b)));
                    }
                    output::write(&dir.join("truncation_decay.csv"), &csv)?;
                    Ok(serde_json::to_value(&rep)?)
                }),
            Check::Concentration => {
                let lstar = setup.oracle.gain.as_ref().expect("oracle gain");
                let mid = GainMatrix::new(model.dynamics(), (setup.l0.gain() + lstar.gain()) * 0.5)?;
                let mut reports = serde_json::Map::new();
                let mut outcome = Ok(());
                for (label, g) in [("initial", &setup.l0), ("midpoint", &mid), ("optimal", lstar)] {
                    let stream = seed::derive(seed, seed::DIAGNOSTIC_STREAM);
                    match concentration_sweep(
                        model,
                        noise,
                        g,
                        d.concentration_horizon,
                        &d.concentration_batch_sizes,
                        d.concentration_reps,
                        stream,
                    ) {
                        Ok(rep) => {
                            let mut csv = String::from("M,deviation,stderr\n");
                            for ((m, e), s) in rep.decay.xs.iter().zip(&rep.decay.errors).zip(&rep.deviation_stderr) {
                                csv.push_str(&format!("{m},{},{}\n", num(*e), num(*s)));
                            }
                            output::write(&dir.join(format!("concentration_{label}.csv")), &csv)?;
                            reports.insert(label.into(), serde_json::to_value(&rep)?);
                        }
                        Err(e) => {
                            outcome = Err(anyhow!("{label} gain: {e}"));
                            break;
                        }
                    }
                }
                outcome.map(|()| Value::Object(reports))
            }
            Check::PowerBound => power_bound_check(gain, d.power_k_max).map_err(Into::into).and_then(|rep| {
                let mut csv = String::from("k,ratio\n");
                for (k, r) in rep.ratios.iter().enumerate() {
                    csv.push_str(&format!("{k},{}\n", num(*r)));
                }
                output::write(&dir.join("power_bound.csv"), &csv)?;
                if rep.worst_ratio > 1.0 {
                    return Err(anyhow!("power bound exceeded at k = {}", rep.worst_k));
                }
                Ok(serde_json::to_value(&rep)?)
            }),
            Check::ErrorVector => Simulator::new(model, *noise)
                .and_then(|sim| sim.simulate(d.duality_horizon, seed::derive(seed, seed::DIAGNOSTIC_STREAM)))
                .and_then(|traj| epsilon_vector_form(model.dynamics(), gain, &traj))
                .map_err(Into::into)
                .and_then(|rep| Ok(serde_json::to_value(rep)?)),
            Check::Duality => {
                let samples = ctx.samples.unwrap_or(d.duality_samples);
                duality_check(model, noise, gain, d.duality_horizon, samples, seed)
                    .map_err(Into::into)
                    .and_then(|rep| {
                        let z = rep.z_score();
                        if z > 4.0 {
                            return Err(anyhow!("Monte-Carlo side is {z:.2} standard errors from the closed form"));
                        }
                        Ok(json!({ "report": rep, "z_score": z }))
                    })
            }
        };
        let (ok, entry) = check_entry(check, result);
        if !ok {
            failed += 1;
            ctx.progress(format!("diagnose: {check:?} failed"));
        }
        entries.push(entry);
    }
    let report = json!({
        "tool": "kalgain",
        "version": kalgain::VERSION,
        "config_source": ctx.source,
        "config_sha256": ctx.config_sha256,
        "seed": seed,
        "gain": rows(gain.gain()),
        "checks": entries,
    });
    output::write_json(&dir.join("diagnose.json"), &report)?;
    if failed > 0 {
        return Err(anyhow!("{failed} diagnostic check(s) failed; see diagnose.json"));
    }
    Ok(())
}
