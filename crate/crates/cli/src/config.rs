//! Experiment description loaded from a TOML file.
//!
//! Every validation failure names the offending key with its dotted path.

use std::path::{Path, PathBuf};

use gpc_ddp::ddp::{DdpOptions, Expansion};
use gpc_ddp::gpc::{Distribution, QuadratureLevel};
use gpc_ddp::verify::McIntegrator;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Duffing,
    Quadrotor,
}

impl ModelKind {
    pub fn state_dim(self) -> usize {
        match self {
            ModelKind::Duffing => 2,
            ModelKind::Quadrotor => 12,
        }
    }

    pub fn control_dim(self) -> usize {
        match self {
            ModelKind::Duffing => 1,
            ModelKind::Quadrotor => 4,
        }
    }

    pub fn param_dim(self) -> usize {
        match self {
            ModelKind::Duffing => 1,
            ModelKind::Quadrotor => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Duffing => "duffing",
            ModelKind::Quadrotor => "quadrotor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorKind {
    Euler,
    Vi,
}

impl IntegratorKind {
    pub fn name(self) -> &'static str {
        match self {
            IntegratorKind::Euler => "euler",
            IntegratorKind::Vi => "vi",
        }
    }
}

/// Either a bare number (deterministic) or a tagged law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DistSpec {
    Constant(f64),
    Law {
        kind: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        std: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<f64>,
    },
}

impl DistSpec {
    fn resolve(&self, key: &str) -> CliResult<Distribution> {
        let need = |v: Option<f64>, field: &str| {
            v.ok_or_else(|| CliError::config(format!("{key}.{field}"), "missing for this kind"))
        };
        let dist = match self {
            DistSpec::Constant(c) => Distribution::Deterministic(*c),
            DistSpec::Law { kind, mean, std, min, max, value } => match kind.as_str() {
                "gaussian" | "normal" => Distribution::Gaussian {
                    mean: need(*mean, "mean")?,
                    std: need(*std, "std")?,
                },
                "uniform" => Distribution::Uniform {
                    min: need(*min, "min")?,
                    max: need(*max, "max")?,
                },
                "deterministic" | "constant" => Distribution::Deterministic(need(value.or(*mean), "value")?),
                other => {
                    return Err(CliError::config(
                        format!("{key}.kind"),
                        format!("unknown distribution kind `{other}` (expected gaussian, uniform or deterministic)"),
                    ))
                }
            },
        };
        dist.validate().map_err(|e| CliError::config(key, e.to_string()))?;
        Ok(dist)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LevelSpec {
    Named(String),
    Nodes(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    pub order: usize,
    #[serde(default = "auto_level")]
    pub quadrature_level: LevelSpec,
}

fn auto_level() -> LevelSpec {
    LevelSpec::Named("auto".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    pub t_final: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub goal: Vec<f64>,
    pub terminal_mean: Vec<f64>,
    #[serde(default)]
    pub terminal_variance: Option<Vec<f64>>,
    #[serde(default)]
    pub running_mean: Option<Vec<f64>>,
    #[serde(default)]
    pub running_variance: Option<Vec<f64>>,
    /// Diagonal of `R` in `½uᵀRu`.
    pub control: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControlSpec {
    Uniform(f64),
    PerInput(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "d_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "d_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "d_qu_tol")]
    pub qu_tol: f64,
    #[serde(default)]
    pub theta_init: f64,
    #[serde(default = "d_theta_min")]
    pub theta_min: f64,
    #[serde(default = "d_theta_max")]
    pub theta_max: f64,
    #[serde(default = "d_halvings")]
    pub line_search_halvings: u32,
    #[serde(default = "d_expansion")]
    pub expansion: String,
    #[serde(default = "d_initial_control")]
    pub initial_control: ControlSpec,
}

fn d_max_iterations() -> usize {
    DdpOptions::default().max_iterations
}
fn d_rel_tol() -> f64 {
    DdpOptions::default().rel_tol
}
fn d_qu_tol() -> f64 {
    DdpOptions::default().qu_tol
}
fn d_theta_min() -> f64 {
    DdpOptions::default().theta_min
}
fn d_theta_max() -> f64 {
    DdpOptions::default().theta_max
}
fn d_halvings() -> u32 {
    DdpOptions::default().line_search_halvings
}
fn d_expansion() -> String {
    "second_order".into()
}
fn d_initial_control() -> ControlSpec {
    ControlSpec::Uniform(0.0)
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            max_iterations: d_max_iterations(),
            rel_tol: d_rel_tol(),
            qu_tol: d_qu_tol(),
            theta_init: 0.0,
            theta_min: d_theta_min(),
            theta_max: d_theta_max(),
            line_search_halvings: d_halvings(),
            expansion: d_expansion(),
            initial_control: d_initial_control(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    #[serde(default = "d_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_mc_integrator")]
    pub integrator: String,
    #[serde(default = "d_substeps")]
    pub substeps: usize,
}

fn d_samples() -> usize {
    1000
}
fn d_mc_integrator() -> String {
    "rk4".into()
}
fn d_substeps() -> usize {
    10
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(default)]
    pub deterministic_ddp: bool,
    #[serde(default)]
    pub monte_carlo: Option<MonteCarloSection>,
}

/// The file as written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub model: String,
    #[serde(default = "d_integrator")]
    pub integrator: String,
    pub basis: BasisSection,
    pub horizon: HorizonSection,
    #[serde(default)]
    pub parameters: Option<Vec<DistSpec>>,
    #[serde(default)]
    pub initial: Option<Vec<DistSpec>>,
    pub cost: CostSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub baselines: BaselineSection,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
}

fn d_integrator() -> String {
    "euler".into()
}
fn d_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostWeights {
    pub goal: Vec<f64>,
    /// Per state, per coefficient.
    pub terminal: Vec<Vec<f64>>,
    pub running: Vec<Vec<f64>>,
    pub control: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McSettings {
    pub n_samples: usize,
    pub seed: u64,
    pub integrator: McIntegrator,
    pub substeps: usize,
}

/// Validated configuration.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub integrator: IntegratorKind,
    pub order: usize,
    pub level: QuadratureLevel,
    pub t_final: f64,
    pub dt: f64,
    pub steps: usize,
    pub parameters: Option<Vec<Distribution>>,
    pub initial: Option<Vec<Distribution>>,
    pub cost: CostSection,
    pub solver: DdpOptions,
    pub initial_control: Vec<f64>,
    pub deterministic_baseline: bool,
    pub monte_carlo: Option<McSettings>,
    pub output_dir: PathBuf,
    /// Echo for `summary.json`.
    pub raw: RawConfig,
}

pub fn load(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config("<file>", format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> CliResult<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let key = e.span().map(|s| text[s].trim().to_string()).unwrap_or_else(|| "<document>".into());
        CliError::config(key, e.message().to_string())
    })?;
    validate(raw)
}

fn positive(key: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(key, format!("must be a positive finite number (got {v})")))
    }
}

fn check_len(key: &str, v: &[f64], n: usize) -> CliResult<()> {
    if v.len() != n {
        return Err(CliError::config(key, format!("expected {n} entries, got {}", v.len())));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(CliError::config(key, format!("non-finite entry {bad}")));
    }
    Ok(())
}

fn nonnegative(key: &str, v: &[f64]) -> CliResult<()> {
    match v.iter().find(|x| **x < 0.0) {
        Some(bad) => Err(CliError::config(key, format!("weights must be >= 0 (got {bad})"))),
        None => Ok(()),
    }
}

pub fn validate(raw: RawConfig) -> CliResult<ExperimentConfig> {
    let model = match raw.model.as_str() {
        "duffing" => ModelKind::Duffing,
        "quadrotor" => ModelKind::Quadrotor,
        other => return Err(CliError::config("model", format!("unknown model `{other}` (expected duffing or quadrotor)"))),
    };
    let integrator = match raw.integrator.as_str() {
        "euler" => IntegratorKind::Euler,
        "vi" => IntegratorKind::Vi,
        other => return Err(CliError::config("integrator", format!("unknown integrator `{other}` (expected euler or vi)"))),
    };
    let level = match &raw.basis.quadrature_level {
        LevelSpec::Named(s) if s == "auto" => QuadratureLevel::Auto,
        LevelSpec::Named(s) => {
            return Err(CliError::config("basis.quadrature_level", format!("expected \"auto\" or a node count, got `{s}`")))
        }
        LevelSpec::Nodes(0) => return Err(CliError::config("basis.quadrature_level", "node count must be >= 1")),
        LevelSpec::Nodes(n) => QuadratureLevel::Fixed(*n),
    };

    let h = &raw.horizon;
    positive("horizon.dt", h.dt)?;
    positive("horizon.t_final", h.t_final)?;
    let ratio = h.t_final / h.dt;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        return Err(CliError::config("horizon.dt", format!("t_final / dt = {ratio} is not an integer")));
    }
    if steps < 2.0 {
        return Err(CliError::config("horizon.dt", format!("horizon needs at least 2 steps (got {steps})")));
    }
    let steps = steps as usize;

    let n = model.state_dim();
    let m = model.control_dim();
    let parameters = match &raw.parameters {
        None => None,
        Some(list) => {
            if list.len() != model.param_dim() {
                return Err(CliError::config(
                    "parameters",
                    format!("{} expects {} entries, got {}", model.name(), model.param_dim(), list.len()),
                ));
            }
            Some(list.iter().enumerate().map(|(i, d)| d.resolve(&format!("parameters[{i}]"))).collect::<CliResult<Vec<_>>>()?)
        }
    };
    let initial = match &raw.initial {
        None => None,
        Some(list) => {
            if list.len() != n {
                return Err(CliError::config("initial", format!("{} expects {n} entries, got {}", model.name(), list.len())));
            }
            Some(list.iter().enumerate().map(|(i, d)| d.resolve(&format!("initial[{i}]"))).collect::<CliResult<Vec<_>>>()?)
        }
    };

    let c = &raw.cost;
    check_len("cost.goal", &c.goal, n)?;
    check_len("cost.terminal_mean", &c.terminal_mean, n)?;
    nonnegative("cost.terminal_mean", &c.terminal_mean)?;
    for (key, v) in [
        ("cost.terminal_variance", &c.terminal_variance),
        ("cost.running_mean", &c.running_mean),
        ("cost.running_variance", &c.running_variance),
    ] {
        if let Some(v) = v {
            check_len(key, v, n)?;
            nonnegative(key, v)?;
        }
    }
    check_len("cost.control", &c.control, m)?;
    if let Some(bad) = c.control.iter().find(|r| !(**r > 0.0)) {
        return Err(CliError::config("cost.control", format!("control weights must be > 0 (got {bad})")));
    }

    let s = &raw.solver;
    if s.max_iterations == 0 {
        return Err(CliError::config("solver.max_iterations", "must be >= 1"));
    }
    positive("solver.rel_tol", s.rel_tol)?;
    positive("solver.qu_tol", s.qu_tol)?;
    positive("solver.theta_min", s.theta_min)?;
    positive("solver.theta_max", s.theta_max)?;
    if !(s.theta_init >= 0.0) || !s.theta_init.is_finite() {
        return Err(CliError::config("solver.theta_init", format!("must be >= 0 (got {})", s.theta_init)));
    }
    if s.theta_max < s.theta_min {
        return Err(CliError::config("solver.theta_max", "must be >= solver.theta_min"));
    }
    let expansion = match s.expansion.as_str() {
        "second_order" => Expansion::SecondOrder,
        "first_order" => Expansion::FirstOrder,
        other => {
            return Err(CliError::config("solver.expansion", format!("expected second_order or first_order, got `{other}`")))
        }
    };
    let initial_control = match &s.initial_control {
        ControlSpec::Uniform(v) => vec![*v; m],
        ControlSpec::PerInput(v) => {
            check_len("solver.initial_control", v, m)?;
            v.clone()
        }
    };
    if initial_control.iter().any(|v| !v.is_finite()) {
        return Err(CliError::config("solver.initial_control", "non-finite entry"));
    }
    let solver = DdpOptions {
        max_iterations: s.max_iterations,
        rel_tol: s.rel_tol,
        qu_tol: s.qu_tol,
        theta_init: s.theta_init,
        theta_min: s.theta_min,
        theta_max: s.theta_max,
        line_search_halvings: s.line_search_halvings,
        expansion,
        ..DdpOptions::default()
    };

    let monte_carlo = match &raw.baselines.monte_carlo {
        None => None,
        Some(mc) => {
            if mc.n_samples < 2 {
                return Err(CliError::config("baselines.monte_carlo.n_samples", "need at least 2 samples"));
            }
            if mc.substeps == 0 {
                return Err(CliError::config("baselines.monte_carlo.substeps", "must be >= 1"));
            }
            let integrator = match mc.integrator.as_str() {
                "rk4" => McIntegrator::Rk4,
                "euler" => McIntegrator::Euler,
                "del" | "vi" => McIntegrator::Del,
                other => {
                    return Err(CliError::config(
                        "baselines.monte_carlo.integrator",
                        format!("expected rk4, euler or del, got `{other}`"),
                    ))
                }
            };
            Some(McSettings {
                n_samples: mc.n_samples,
                seed: mc.seed,
                integrator,
                substeps: mc.substeps,
            })
        }
    };

    Ok(ExperimentConfig {
        model,
        integrator,
        order: raw.basis.order,
        level,
        t_final: h.t_final,
        dt: h.dt,
        steps,
        parameters,
        initial,
        cost: raw.cost.clone(),
        solver,
        initial_control,
        deterministic_baseline: raw.baselines.deterministic_ddp,
        monte_carlo,
        output_dir: raw.output_dir.clone(),
        raw,
    })
}

impl ExperimentConfig {
    /// Per-coefficient weights for `n_coeffs` basis terms, variance weights
    /// on every `j > 0` slot.
    pub fn weights(&self, n_coeffs: usize) -> CostWeights {
        let c = &self.cost;
        let n = self.model.state_dim();
        let expand = |mean: &[f64], var: Option<&Vec<f64>>| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    (0..n_coeffs)
                        .map(|j| if j == 0 { mean[i] } else { var.map_or(0.0, |v| v[i]) })
                        .collect()
                })
                .collect()
        };
        let zeros = vec![0.0; n];
        CostWeights {
            goal: c.goal.clone(),
            terminal: expand(&c.terminal_mean, c.terminal_variance.as_ref()),
            running: expand(c.running_mean.as_deref().unwrap_or(&zeros), c.running_variance.as_ref()),
            control: c.control.clone(),
        }
    }
}
