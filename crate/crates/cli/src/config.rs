//! Experiment configuration: a strict TOML schema and its conversion into
//! library types. Unknown keys are rejected at every level.

use std::fmt;

use kalgain::system::{MassSpring, DEFAULT_KAPPA_SIGMAS};
use kalgain::{InitStrategy, Matrix, NoiseConfig, NoiseFamily, Safeguard, SgdConfig, SystemModel, Vector};
use serde::Deserialize;

/// Anything wrong with the configuration. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

pub const PRESETS: &[(&str, &str)] = &[
    ("mass_spring", include_str!("../../../configs/mass_spring.toml")),
    ("mass_spring_horizon", include_str!("../../../configs/mass_spring_horizon.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub learner: LearnerSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    MassSpring,
}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<Preset>,
    pub mass_spring: Option<MassSpringSection>,
    pub a: Option<Rows>,
    pub h: Option<Rows>,
    pub q: Option<Rows>,
    pub r: Option<Rows>,
    pub p0: Option<Rows>,
    pub m0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MassSpringSection {
    pub omega: Option<f64>,
    pub dt: Option<f64>,
    pub process_var: Option<f64>,
    pub measurement_var: Option<f64>,
    pub initial_var: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub family: NoiseFamily,
    pub kappa_xi: Option<f64>,
    pub kappa_omega: Option<f64>,
    /// Shorthand: bounds at this many standard deviations.
    pub sigmas: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Sgd,
    Gd,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSection {
    pub method: Method,
    pub step_size: f64,
    pub batch_size: usize,
    pub horizon: usize,
    pub max_iters: usize,
    pub safeguard: Safeguard,
    pub target_rho: f64,
    pub max_rejections: usize,
    pub gd_tolerance: f64,
    pub init: InitSection,
}

impl Default for LearnerSection {
    fn default() -> Self {
        let d = SgdConfig::default();
        Self {
            method: Method::Sgd,
            step_size: d.step_size,
            batch_size: d.batch_size,
            horizon: d.horizon,
            max_iters: d.max_iters,
            safeguard: d.safeguard,
            target_rho: d.target_rho,
            max_rejections: d.max_rejections,
            gd_tolerance: 1e-10,
            init: InitSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    SurrogateDare,
    ZeroIfStable,
    User,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default)]
    pub strategy: InitKind,
    pub process_scale: Option<f64>,
    pub measurement_scale: Option<f64>,
    pub gain: Option<Rows>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub batch_sizes: Vec<usize>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            batch_sizes: Vec::new(),
            horizons: Vec::new(),
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    TruncationDecay,
    Concentration,
    PowerBound,
    ErrorVector,
    Duality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainChoice {
    #[default]
    Optimal,
    Initial,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub checks: Vec<Check>,
    /// Gain used by the single-gain checks.
    pub gain: GainChoice,
    pub truncation_horizons: Vec<usize>,
    pub concentration_batch_sizes: Vec<usize>,
    pub concentration_horizon: usize,
    pub concentration_reps: usize,
    pub power_k_max: usize,
    pub duality_horizon: usize,
    pub duality_samples: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            checks: vec![
                Check::TruncationDecay,
                Check::Concentration,
                Check::PowerBound,
                Check::ErrorVector,
                Check::Duality,
            ],
            gain: GainChoice::Optimal,
            truncation_horizons: vec![5, 10, 20, 40, 80],
            concentration_batch_sizes: vec![16, 64, 256],
            concentration_horizon: 50,
            concentration_reps: 50,
            power_k_max: 50,
            duality_horizon: 50,
            duality_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: String,
    pub formats: Vec<Format>,
    /// Fill the `wall_ms` column. Off by default so that output is reproducible byte for byte.
    pub wall_clock: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: "kalgain-out".into(),
            formats: vec![Format::Csv],
            wall_clock: false,
        }
    }
}

/// Parses and checks the schema. Syntax and unknown-key errors carry the
/// line and column from the TOML parser.
pub fn parse(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| bad(format!("{origin}: {e}")))?;
    cfg.check().map_err(|e| bad(format!("{origin}: {e}")))?;
    Ok(cfg)
}

fn matrix(name: &str, rows: &Rows) -> Result<Matrix, ConfigError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(bad(format!("model.{name} must be a non-empty array of rows")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(bad(format!("model.{name}: rows have different lengths")));
    }
    Ok(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    fn check(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.preset.is_none() {
            if m.mass_spring.is_some() {
                return Err(bad("model.mass_spring needs preset = \"mass_spring\""));
            }
            for (name, v) in [("a", &m.a), ("h", &m.h), ("q", &m.q), ("r", &m.r), ("p0", &m.p0)] {
                if v.is_none() {
                    return Err(bad(format!("model.{name} is required without a preset")));
                }
            }
        }
        let n = &self.noise;
        if n.sigmas.is_some() && (n.kappa_xi.is_some() || n.kappa_omega.is_some()) {
            return Err(bad("noise.sigmas cannot be combined with explicit kappa bounds"));
        }
        if n.kappa_xi.is_some() != n.kappa_omega.is_some() {
            return Err(bad("noise.kappa_xi and noise.kappa_omega must be given together"));
        }
        if let Some(s) = n.sigmas {
            if !(s > 0.0 && s.is_finite()) {
                return Err(bad("noise.sigmas must be positive"));
            }
        }
        let init = &self.learner.init;
        match init.strategy {
            InitKind::User if init.gain.is_none() => return Err(bad("learner.init.gain is required for strategy = \"user\"")),
            InitKind::User | InitKind::ZeroIfStable
                if init.process_scale.is_some() || init.measurement_scale.is_some() =>
            {
                return Err(bad("learner.init scales only apply to strategy = \"surrogate_dare\""))
            }
            InitKind::SurrogateDare | InitKind::ZeroIfStable if init.gain.is_some() => {
                return Err(bad("learner.init.gain only applies to strategy = \"user\""))
            }
            _ => {}
        }
        if !(self.learner.gd_tolerance > 0.0) {
            return Err(bad("learner.gd_tolerance must be positive"));
        }
        self.sgd_config(0, None, None).validate().map_err(|e| bad(format!("learner: {e}")))?;
        let s = &self.sweep;
        if s.batch_sizes.contains(&0) || s.horizons.contains(&0) {
            return Err(bad("sweep batch sizes and horizons must be at least 1"));
        }
        if s.seeds.is_empty() {
            return Err(bad("sweep.seeds must not be empty"));
        }
        let d = &self.diagnostics;
        if d.duality_horizon == 0 || d.duality_samples == 0 || d.concentration_horizon == 0 {
            return Err(bad("diagnostics horizons and sample counts must be at least 1"));
        }
        if self.output.formats.is_empty() {
            return Err(bad("output.formats must not be empty"));
        }
        Ok(())
    }

    /// Validated model. The preset supplies defaults that explicit matrices override.
    pub fn system_model(&self) -> Result<SystemModel, ConfigError> {
        let m = &self.model;
        let base = match m.preset {
            Some(Preset::MassSpring) => {
                let d = MassSpring::default();
                let p = m.mass_spring.clone().unwrap_or_default();
                let params = MassSpring {
                    omega: p.omega.unwrap_or(d.omega),
                    dt: p.dt.unwrap_or(d.dt),
                    process_var: p.process_var.unwrap_or(d.process_var),
                    measurement_var: p.measurement_var.unwrap_or(d.measurement_var),
                    initial_var: p.initial_var.unwrap_or(d.initial_var),
                };
                Some(SystemModel::mass_spring(&params).map_err(|e| bad(format!("model: {e}")))?)
            }
            None => None,
        };
        let pick = |name: &str, rows: &Option<Rows>, fallback: Option<&Matrix>| -> Result<Matrix, ConfigError> {
            match (rows, fallback) {
                (Some(r), _) => matrix(name, r),
                (None, Some(f)) => Ok(f.clone()),
                (None, None) => Err(bad(format!("model.{name} is required without a preset"))),
            }
        };
        let a = pick("a", &m.a, base.as_ref().map(SystemModel::a))?;
        let h = pick("h", &m.h, base.as_ref().map(SystemModel::h))?;
        let q = pick("q", &m.q, base.as_ref().map(SystemModel::q))?;
        let r = pick("r", &m.r, base.as_ref().map(SystemModel::r))?;
        let p0 = pick("p0", &m.p0, base.as_ref().map(SystemModel::p0))?;
        let m0 = m.m0.as_ref().map(|v| Vector::from_column_slice(v));
        SystemModel::new(a, h, q, r, p0, m0).map_err(|e| bad(format!("model: {e}")))
    }

    pub fn noise_config(&self, model: &SystemModel) -> Result<NoiseConfig, ConfigError> {
        let n = &self.noise;
        let cfg = match (n.kappa_xi, n.kappa_omega, n.sigmas) {
            (Some(xi), Some(om), _) => NoiseConfig::new(xi, om, n.family),
            (_, _, Some(s)) => {
                let base = NoiseConfig::for_model(model, n.family);
                let scale = s / DEFAULT_KAPPA_SIGMAS;
                NoiseConfig::new(base.kappa_xi * scale, base.kappa_omega * scale, n.family)
            }
            _ => Ok(NoiseConfig::for_model(model, n.family)),
        };
        cfg.map_err(|e| bad(format!("noise: {e}")))
    }

    pub fn init_strategy(&self) -> Result<InitStrategy, ConfigError> {
        let init = &self.learner.init;
        Ok(match init.strategy {
            InitKind::SurrogateDare => InitStrategy::SurrogateDare {
                process_scale: init.process_scale.unwrap_or(1.0),
                measurement_scale: init.measurement_scale.unwrap_or(1.0),
            },
            InitKind::ZeroIfStable => InitStrategy::ZeroIfStable,
            InitKind::User => InitStrategy::User(matrix("learner.init.gain", init.gain.as_ref().expect("checked"))?),
        })
    }

    /// SGD settings for one run; `None` keeps the learner block's value.
    pub fn sgd_config(&self, seed: u64, batch_size: Option<usize>, horizon: Option<usize>) -> SgdConfig {
        let l = &self.learner;
        SgdConfig {
            step_size: l.step_size,
            batch_size: batch_size.unwrap_or(l.batch_size),
            horizon: horizon.unwrap_or(l.horizon),
            max_iters: l.max_iters,
            seed,
            safeguard: l.safeguard,
            target_rho: l.target_rho,
            max_rejections: l.max_rejections,
        }
    }

    /// Sweep grid, falling back to the learner block's single cell.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let ms = if self.sweep.batch_sizes.is_empty() {
            vec![self.learner.batch_size]
        } else {
            self.sweep.batch_sizes.clone()
        };
        let ts = if self.sweep.horizons.is_empty() {
            vec![self.learner.horizon]
        } else {
            self.sweep.horizons.clone()
        };
        ts.iter().flat_map(|&t| ms.iter().map(move |&m| (m, t))).collect()
    }
}
