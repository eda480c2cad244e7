//! Running configured experiments and collecting their results.

use std::time::Instant;

use gpc_ddp::cost::{embed_goal, Goal, QuadraticGpcCost};
use gpc_ddp::ddp::{solve, DdpSolution, Termination};
use gpc_ddp::discretize::{DelGpc, EulerGpc};
use gpc_ddp::gpc::{moments, Distribution, GpcModel};
use gpc_ddp::models::{Duffing, Dynamics, Mechanical, Quadrotor};
use gpc_ddp::verify::{gpc_replay, mc_propagate_mechanical, McConfig, McEstimate};
use nalgebra::{DMatrix, DVector};

use crate::config::{ExperimentConfig, IntegratorKind, McSettings, ModelKind};
use crate::error::{CliError, CliResult};

/// Step of the fine reference grid used when replaying optimized controls.
pub const REPLAY_DT: f64 = 1e-3;

/// One optimization, with the trajectory mapped back to gPC coefficients.
#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub integrator: IntegratorKind,
    pub dt: f64,
    pub n_coeffs: usize,
    /// Coefficient vectors `X` per step, `K_f + 1` of them.
    pub coefficients: Vec<DVector<f64>>,
    pub solution: DdpSolution,
    pub wall_time: f64,
}

impl SolveOutcome {
    pub fn terminal(&self) -> &DVector<f64> {
        self.coefficients.last().expect("trajectory is never empty")
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub model: ModelKind,
    pub state_dim: usize,
    pub gpc_dim: usize,
    pub outcome: SolveOutcome,
    /// `[mean, variance, third central moment]` per step.
    pub moments: Vec<[Vec<f64>; 3]>,
    pub mc: Option<McEstimate>,
    pub baseline: Option<SolveOutcome>,
    pub baseline_mc: Option<McEstimate>,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub integrator: IntegratorKind,
    pub dt: f64,
    pub termination: Termination,
    pub iterations: usize,
    pub cost: f64,
    /// Terminal mean predicted by the optimizer's own discretization.
    pub predicted_mean: Vec<f64>,
    /// Terminal mean after replaying the controls on the fine grid.
    pub replay_mean: Vec<f64>,
    /// `‖replay − predicted‖`.
    pub model_discrepancy: f64,
    /// `‖replay − replay at the smallest dt‖` for the same integrator.
    pub dt_discrepancy: f64,
}

#[derive(Clone, Debug)]
pub struct McCheckReport {
    pub state_dim: usize,
    pub gpc: Vec<[Vec<f64>; 3]>,
    pub coefficients: Vec<DVector<f64>>,
    pub mc: McEstimate,
    pub dt: f64,
}

/// Dispatches `body` on the configured model with its configured laws.
macro_rules! with_model {
    ($cfg:expr, |$m:ident| $body:expr) => {
        match $cfg.model {
            ModelKind::Duffing => {
                let $m = duffing($cfg);
                $body
            }
            ModelKind::Quadrotor => {
                let $m = quadrotor($cfg);
                $body
            }
        }
    };
}

fn duffing(cfg: &ExperimentConfig) -> Duffing {
    let mut m = Duffing::default();
    if let Some(p) = &cfg.parameters {
        m.lambda = p[0];
    }
    if let Some(x) = &cfg.initial {
        m.x1_0 = x[0];
        m.x2_0 = x[1];
    }
    m
}

fn quadrotor(cfg: &ExperimentConfig) -> Quadrotor {
    let mut m = Quadrotor::default();
    if let Some(p) = &cfg.parameters {
        m.g_tr = p[0];
        m.g_rot = p[1];
    }
    if let Some(x) = &cfg.initial {
        m.initial = x.clone();
    }
    m
}

fn gpc_model<M: Dynamics>(model: M, cfg: &ExperimentConfig) -> CliResult<GpcModel<M>> {
    Ok(GpcModel::new(model, cfg.order, cfg.level)?)
}

/// Same model with every law collapsed to its mean and order 0.
fn mean_model<M: Dynamics + Clone>(model: &M, cfg: &ExperimentConfig) -> CliResult<GpcModel<M>> {
    let det = |d: &Distribution| Distribution::Deterministic(d.mean());
    let params: Vec<_> = model.param_distributions().iter().map(det).collect();
    let initial: Vec<_> = model.initial_distributions().iter().map(det).collect();
    Ok(GpcModel::with_distributions(model.clone(), &params, &initial, 0, cfg.level)?)
}

fn cost_for<M: Dynamics>(gpc: &GpcModel<M>, cfg: &ExperimentConfig, dt: f64, steps: usize) -> CliResult<QuadraticGpcCost> {
    let w = cfg.weights(gpc.n_coeffs());
    let r = DMatrix::from_diagonal(&DVector::from_vec(w.control.clone()));
    let goal = Goal::Constant(embed_goal(&w.goal, gpc.basis()));
    Ok(QuadraticGpcCost::weighted(&w.running, &w.terminal, &r, goal, steps, dt, gpc.basis())?)
}

fn steps_for(t_final: f64, dt: f64, key: &str) -> CliResult<usize> {
    if !(dt > 0.0) {
        return Err(CliError::config(key, format!("dt must be positive (got {dt})")));
    }
    let ratio = t_final / dt;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) || steps < 2.0 {
        return Err(CliError::config(key, format!("t_final / dt = {ratio} must be an integer >= 2")));
    }
    Ok(steps as usize)
}

/// Optimizes with the given integrator and step.
pub fn optimize<M: Mechanical>(
    gpc: &GpcModel<M>,
    cfg: &ExperimentConfig,
    integrator: IntegratorKind,
    dt: f64,
) -> CliResult<SolveOutcome> {
    let steps = steps_for(cfg.t_final, dt, "horizon.dt")?;
    let cost = cost_for(gpc, cfg, dt, steps)?;
    let x0 = gpc.initial_coefficients()?;
    let u0 = vec![DVector::from_vec(cfg.initial_control.clone()); steps];
    let start = Instant::now();
    let (solution, coefficients) = match integrator {
        IntegratorKind::Euler => {
            let disc = EulerGpc::new(gpc, dt)?;
            let sol = solve(&disc, &cost, &x0, u0, &cfg.solver)?;
            let xs = sol.states.clone();
            (sol, xs)
        }
        IntegratorKind::Vi => {
            let disc = DelGpc::new(gpc, dt)?;
            let nq = gpc.model().config_dim();
            let scaled = cost.rescaled(&disc.momentum_scaling(&cfg.cost.goal[..nq]))?;
            let z0 = disc.state_from_coefficients(&x0);
            let sol = solve(&disc, &scaled, &z0, u0, &cfg.solver)?;
            let xs = sol
                .states
                .iter()
                .map(|z| disc.coefficients_from_state(z))
                .collect::<gpc_ddp::Result<Vec<_>>>()?;
            (sol, xs)
        }
    };
    Ok(SolveOutcome {
        integrator,
        dt,
        n_coeffs: gpc.n_coeffs(),
        coefficients,
        solution,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn mc_config(s: &McSettings) -> McConfig {
    McConfig {
        n_samples: s.n_samples,
        seed: s.seed,
        integrator: s.integrator,
        substeps: s.substeps,
    }
}

fn trajectory_moments<M: Dynamics>(gpc: &GpcModel<M>, xs: &[DVector<f64>]) -> Vec<[Vec<f64>; 3]> {
    xs.iter().map(|x| moments(x, gpc.basis())).collect()
}

fn run_with<M: Mechanical + Clone>(model: M, cfg: &ExperimentConfig) -> CliResult<RunReport> {
    let gpc = gpc_model(model.clone(), cfg)?;
    let outcome = optimize(&gpc, cfg, cfg.integrator, cfg.dt)?;
    let moments = trajectory_moments(&gpc, &outcome.coefficients);
    let mc = match &cfg.monte_carlo {
        Some(s) => Some(mc_propagate_mechanical(&model, &outcome.solution.controls, cfg.dt, &mc_config(s))?),
        None => None,
    };
    let (baseline, baseline_mc) = if cfg.deterministic_baseline {
        let det = mean_model(&model, cfg)?;
        let b = optimize(&det, cfg, cfg.integrator, cfg.dt)?;
        let bmc = match &cfg.monte_carlo {
            Some(s) => Some(mc_propagate_mechanical(&model, &b.solution.controls, cfg.dt, &mc_config(s))?),
            None => None,
        };
        (Some(b), bmc)
    } else {
        (None, None)
    };
    Ok(RunReport {
        model: cfg.model,
        state_dim: cfg.model.state_dim(),
        gpc_dim: gpc.dim(),
        outcome,
        moments,
        mc,
        baseline,
        baseline_mc,
    })
}

/// Optimizes per the configuration, then runs the requested baselines.
pub fn run(cfg: &ExperimentConfig) -> CliResult<RunReport> {
    with_model!(cfg, |m| run_with(m, cfg))
}

fn sweep_with<M: Mechanical + Clone>(model: M, cfg: &ExperimentConfig, dts: &[f64]) -> CliResult<Vec<SweepRow>> {
    let gpc = gpc_model(model, cfg)?;
    let x0 = gpc.initial_coefficients()?;
    let n = cfg.model.state_dim();
    let finest = dts.iter().copied().fold(f64::INFINITY, f64::min);
    let mut rows = Vec::new();
    for integrator in [IntegratorKind::Euler, IntegratorKind::Vi] {
        let mut block = Vec::new();
        for &dt in dts {
            let out = optimize(&gpc, cfg, integrator, dt)?;
            let substeps = (dt / REPLAY_DT).round();
            if (dt / REPLAY_DT - substeps).abs() > 1e-9 * substeps.max(1.0) {
                return Err(CliError::config("--dt", format!("{dt} is not a multiple of the replay step {REPLAY_DT}")));
            }
            let replay = gpc_replay(&gpc, &x0, &out.solution.controls, dt, substeps as usize)?;
            let predicted_mean = moments(out.terminal(), gpc.basis())[0].clone();
            let replay_mean = moments(replay.last().expect("non-empty replay"), gpc.basis())[0].clone();
            block.push((dt, out, predicted_mean, replay_mean));
        }
        let reference = block
            .iter()
            .find(|(dt, ..)| *dt == finest)
            .map(|(_, _, _, r)| r.clone())
            .expect("finest dt is in the list");
        for (dt, out, predicted_mean, replay_mean) in block {
            let dist = |a: &[f64], b: &[f64]| (0..n).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
            rows.push(SweepRow {
                integrator,
                dt,
                termination: out.solution.termination,
                iterations: out.solution.records.len(),
                cost: out.solution.cost,
                model_discrepancy: dist(&replay_mean, &predicted_mean),
                dt_discrepancy: dist(&replay_mean, &reference),
                predicted_mean,
                replay_mean,
            });
        }
    }
    Ok(rows)
}

/// Solves the problem with both integrators at every `dt` and replays each
/// result on the fine grid.
pub fn sweep_dt(cfg: &ExperimentConfig, dts: &[f64]) -> CliResult<Vec<SweepRow>> {
    if dts.len() < 2 {
        return Err(CliError::config("--dt", format!("need at least 2 step sizes, got {}", dts.len())));
    }
    for &dt in dts {
        steps_for(cfg.t_final, dt, "--dt")?;
    }
    with_model!(cfg, |m| sweep_with(m, cfg, dts))
}

fn mc_check_with<M: Mechanical + Clone>(model: M, cfg: &ExperimentConfig, settings: &McSettings) -> CliResult<McCheckReport> {
    let gpc = gpc_model(model.clone(), cfg)?;
    let x0 = gpc.initial_coefficients()?;
    let controls = vec![DVector::from_vec(cfg.initial_control.clone()); cfg.steps];
    let coefficients = gpc_replay(&gpc, &x0, &controls, cfg.dt, settings.substeps)?;
    let mc = mc_propagate_mechanical(&model, &controls, cfg.dt, &mc_config(settings))?;
    Ok(McCheckReport {
        state_dim: cfg.model.state_dim(),
        gpc: trajectory_moments(&gpc, &coefficients),
        coefficients,
        mc,
        dt: cfg.dt,
    })
}

/// Propagates the initial control guess through the gPC system (RK4) and the
/// Monte-Carlo oracle side by side.
pub fn mc_check(cfg: &ExperimentConfig) -> CliResult<McCheckReport> {
    let defaults = McSettings {
        n_samples: 1000,
        seed: 0,
        integrator: gpc_ddp::verify::McIntegrator::Rk4,
        substeps: 10,
    };
    let settings = cfg.monte_carlo.clone().unwrap_or(defaults);
    with_model!(cfg, |m| mc_check_with(m, cfg, &settings))
}

/// gPC state dimension the configuration produces.
pub fn gpc_dimension(cfg: &ExperimentConfig) -> CliResult<usize> {
    with_model!(cfg, |m| Ok(gpc_model(m, cfg)?.dim()))
}
