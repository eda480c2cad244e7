//! Turning experiment results into the on-disk artifact set.

use std::path::Path;

use gpc_ddp::verify::McEstimate;
use nalgebra::DVector;
use serde_json::{json, Value};

use crate::artifacts::{write_atomic, write_table, Cell, Table};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::experiment::{McCheckReport, RunReport, SolveOutcome, SweepRow};

/// Keys of `summary.json`, in file order.
pub const SUMMARY_KEYS: [&str; 18] = [
    "accepted_iterations",
    "baseline",
    "config",
    "cost",
    "dt",
    "gpc_dim",
    "integrator",
    "iterations",
    "max_qu",
    "model",
    "monte_carlo",
    "n_coeffs",
    "steps",
    "terminal_mean",
    "terminal_third",
    "terminal_variance",
    "termination",
    "wall_time_s",
];

pub fn trajectory_table(state_dim: usize, control_dim: usize, out: &SolveOutcome, moments: &[[Vec<f64>; 3]]) -> Table {
    let k = out.n_coeffs;
    let mut header = vec!["time".to_string()];
    for i in 0..state_dim {
        for j in 0..k {
            header.push(format!("X_{i}_{j}"));
        }
    }
    for name in ["mean", "var", "third"] {
        header.extend((0..state_dim).map(|i| format!("{name}_{i}")));
    }
    header.extend((0..control_dim).map(|a| format!("u_{a}")));
    let mut t = Table::new(header);
    let controls = &out.solution.controls;
    for (step, x) in out.coefficients.iter().enumerate() {
        let mut row: Vec<Cell> = vec![(step as f64 * out.dt).into()];
        row.extend(x.iter().map(|v| Cell::Num(*v)));
        for m in &moments[step] {
            row.extend(m.iter().map(|v| Cell::Num(*v)));
        }
        match controls.get(step) {
            Some(u) => row.extend(u.iter().map(|v| Cell::Num(*v))),
            None => row.extend((0..control_dim).map(|_| Cell::Empty)),
        }
        t.push(row);
    }
    t
}

/// One row for the initial guess, then one per iteration (accepted or not).
pub fn convergence_table(out: &SolveOutcome) -> Table {
    let sol = &out.solution;
    let dist = sol.control_distances();
    let mut t = Table::new(
        ["iteration", "cost", "control_distance", "gamma", "theta", "max_qu"]
            .map(String::from)
            .to_vec(),
    );
    t.push(vec![0usize.into(), sol.cost_history[0].into(), dist[0].into(), Cell::Empty, Cell::Empty, Cell::Empty]);
    let mut accepted = 0;
    for r in &sol.records {
        if r.gamma.is_some() {
            accepted += 1;
        }
        t.push(vec![
            r.iteration.into(),
            r.cost.into(),
            dist[accepted].into(),
            r.gamma.into(),
            r.theta.into(),
            r.max_qu.into(),
        ]);
    }
    t
}

/// Feed-forward and feedback gains in the optimizer's own state coordinates.
pub fn gains_table(out: &SolveOutcome) -> Table {
    let sol = &out.solution;
    let m = sol.ff.first().map_or(0, |f| f.len());
    let n = sol.fb.first().map_or(0, |f| f.ncols());
    let mut header = vec!["step".to_string()];
    header.extend((0..m).map(|a| format!("ff_{a}")));
    for a in 0..m {
        header.extend((0..n).map(|b| format!("fb_{a}_{b}")));
    }
    let mut t = Table::new(header);
    for (k, (ff, fb)) in sol.ff.iter().zip(&sol.fb).enumerate() {
        let mut row: Vec<Cell> = vec![k.into()];
        row.extend(ff.iter().map(|v| Cell::Num(*v)));
        for a in 0..m {
            row.extend((0..n).map(|b| Cell::Num(fb[(a, b)])));
        }
        t.push(row);
    }
    t
}

pub fn mc_table(state_dim: usize, dt: f64, mc: &McEstimate) -> Table {
    let mut header = vec!["time".to_string()];
    for name in ["mean", "var", "third", "se_mean", "se_var", "se_third"] {
        header.extend((0..state_dim).map(|i| format!("{name}_{i}")));
    }
    let mut t = Table::new(header);
    for k in 0..mc.mean.len() {
        let mut row: Vec<Cell> = vec![(k as f64 * dt).into()];
        for series in [&mc.mean, &mc.variance, &mc.third, &mc.se_mean, &mc.se_variance, &mc.se_third] {
            row.extend(series[k].iter().map(|v| Cell::Num(*v)));
        }
        t.push(row);
    }
    t
}

pub fn sweep_table(state_dim: usize, rows: &[SweepRow]) -> Table {
    let mut header: Vec<String> = ["integrator", "dt", "termination", "iterations", "cost"].map(String::from).to_vec();
    header.extend((0..state_dim).map(|i| format!("predicted_mean_{i}")));
    header.extend((0..state_dim).map(|i| format!("replay_mean_{i}")));
    header.push("model_discrepancy".into());
    header.push("dt_discrepancy".into());
    let mut t = Table::new(header);
    for r in rows {
        let mut row: Vec<Cell> = vec![
            r.integrator.name().into(),
            r.dt.into(),
            r.termination.as_str().into(),
            r.iterations.into(),
            r.cost.into(),
        ];
        row.extend(r.predicted_mean.iter().map(|v| Cell::Num(*v)));
        row.extend(r.replay_mean.iter().map(|v| Cell::Num(*v)));
        row.push(r.model_discrepancy.into());
        row.push(r.dt_discrepancy.into());
        t.push(row);
    }
    t
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.as_slice())
}

fn mc_json(mc: &McEstimate) -> Value {
    let last = mc.mean.len() - 1;
    json!({
        "n_samples": mc.n_samples,
        "failed": mc.failed,
        "seed": mc.seed,
        "terminal_mean": vec_json(&mc.mean[last]),
        "terminal_variance": vec_json(&mc.variance[last]),
        "terminal_se_mean": vec_json(&mc.se_mean[last]),
        "terminal_se_variance": vec_json(&mc.se_variance[last]),
    })
}

pub fn summary(cfg: &ExperimentConfig, report: &RunReport) -> Value {
    let out = &report.outcome;
    let sol = &out.solution;
    let last = report.moments.last().expect("trajectory is never empty");
    let baseline = report.baseline.as_ref().map(|b| {
        json!({
            "termination": b.solution.termination.as_str(),
            "cost": b.solution.cost,
            "iterations": b.solution.records.len(),
            "terminal_mean": vec_json(b.terminal()),
            "monte_carlo": report.baseline_mc.as_ref().map(mc_json),
        })
    });
    json!({
        "accepted_iterations": sol.control_history.len() - 1,
        "baseline": baseline,
        "config": serde_json::to_value(&cfg.raw).unwrap_or(Value::Null),
        "cost": sol.cost,
        "dt": out.dt,
        "gpc_dim": report.gpc_dim,
        "integrator": out.integrator.name(),
        "iterations": sol.records.len(),
        "max_qu": sol.max_qu,
        "model": report.model.name(),
        "monte_carlo": report.mc.as_ref().map(mc_json),
        "n_coeffs": out.n_coeffs,
        "steps": sol.controls.len(),
        "terminal_mean": last[0],
        "terminal_third": last[2],
        "terminal_variance": last[1],
        "termination": sol.termination.as_str(),
        "wall_time_s": out.wall_time,
    })
}

pub fn write_run(dir: &Path, cfg: &ExperimentConfig, report: &RunReport) -> CliResult<()> {
    let n = report.state_dim;
    let m = cfg.model.control_dim();
    write_table(dir, "trajectory.csv", &trajectory_table(n, m, &report.outcome, &report.moments))?;
    write_table(dir, "convergence.csv", &convergence_table(&report.outcome))?;
    write_table(dir, "gains.csv", &gains_table(&report.outcome))?;
    if let Some(mc) = &report.mc {
        write_table(dir, "mc.csv", &mc_table(n, cfg.dt, mc))?;
    }
    if let Some(b) = &report.baseline {
        let det_moments: Vec<[Vec<f64>; 3]> = b
            .coefficients
            .iter()
            .map(|x| [x.as_slice().to_vec(), vec![0.0; n], vec![0.0; n]])
            .collect();
        write_table(dir, "baseline_trajectory.csv", &trajectory_table(n, m, b, &det_moments))?;
        write_table(dir, "baseline_convergence.csv", &convergence_table(b))?;
    }
    if let Some(mc) = &report.baseline_mc {
        write_table(dir, "baseline_mc.csv", &mc_table(n, cfg.dt, mc))?;
    }
    let text = serde_json::to_string_pretty(&summary(cfg, report)).expect("summary serializes");
    write_atomic(&dir.join("summary.json"), &(text + "\n"))
}

pub fn write_sweep(dir: &Path, state_dim: usize, rows: &[SweepRow]) -> CliResult<()> {
    write_table(dir, "dt_sweep.csv", &sweep_table(state_dim, rows))
}

pub fn write_mc_check(dir: &Path, report: &McCheckReport) -> CliResult<()> {
    let n = report.state_dim;
    let k = report.coefficients[0].len() / n;
    let mut header = vec!["time".to_string()];
    for i in 0..n {
        header.extend((0..k).map(|j| format!("X_{i}_{j}")));
    }
    for name in ["mean", "var", "third"] {
        header.extend((0..n).map(|i| format!("{name}_{i}")));
    }
    let mut t = Table::new(header);
    for (step, x) in report.coefficients.iter().enumerate() {
        let mut row: Vec<Cell> = vec![(step as f64 * report.dt).into()];
        row.extend(x.iter().map(|v| Cell::Num(*v)));
        for m in &report.gpc[step] {
            row.extend(m.iter().map(|v| Cell::Num(*v)));
        }
        t.push(row);
    }
    write_table(dir, "trajectory.csv", &t)?;
    write_table(dir, "mc.csv", &mc_table(n, report.dt, &report.mc))
}
