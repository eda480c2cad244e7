use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gpc_ddp_cli::experiment;
use gpc_ddp_cli::report;
use gpc_ddp_cli::{load, CliResult, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "gpcddp", version, about = "Trajectory optimization under parametric uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Monte-Carlo seed; overrides `baselines.monte_carlo.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for linearization and sampling.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize and write trajectory, convergence and summary artifacts.
    Run { config: PathBuf },
    /// Solve with both integrators at each step size and replay on a fine grid.
    SweepDt {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        dt: Vec<f64>,
    },
    /// Propagate the initial controls by gPC and by Monte-Carlo sampling.
    Mc { config: PathBuf },
    /// Validate the config and print what it describes.
    Check { config: PathBuf },
}

fn prepare(path: &PathBuf, cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = load(path)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let (Some(seed), Some(mc)) = (cli.seed, cfg.monte_carlo.as_mut()) {
        mc.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = prepare(config, cli)?;
            let rep = experiment::run(&cfg)?;
            report::write_run(&cfg.output_dir, &cfg, &rep)?;
            let sol = &rep.outcome.solution;
            println!(
                "{}: {} after {} iterations, cost {:.6e}, artifacts in {}",
                cfg.model.name(),
                sol.termination.as_str(),
                sol.records.len(),
                sol.cost,
                cfg.output_dir.display()
            );
        }
        Command::SweepDt { config, dt } => {
            let cfg = prepare(config, cli)?;
            let rows = experiment::sweep_dt(&cfg, dt)?;
            report::write_sweep(&cfg.output_dir, cfg.model.state_dim(), &rows)?;
            for r in &rows {
                println!(
                    "{:>5} dt={:<8} {:<24} dt_discrepancy={:.4e} model_discrepancy={:.4e}",
                    r.integrator.name(),
                    r.dt,
                    r.termination.as_str(),
                    r.dt_discrepancy,
                    r.model_discrepancy
                );
            }
        }
        Command::Mc { config } => {
            let cfg = prepare(config, cli)?;
            let rep = experiment::mc_check(&cfg)?;
            report::write_mc_check(&cfg.output_dir, &rep)?;
            println!("{} samples ({} failed), artifacts in {}", rep.mc.n_samples, rep.mc.failed, cfg.output_dir.display());
        }
        Command::Check { config } => {
            let cfg = prepare(config, cli)?;
            println!(
                "ok: {} / {}, order {}, {} steps of {}, gPC state dimension {}",
                cfg.model.name(),
                cfg.integrator.name(),
                cfg.order,
                cfg.steps,
                cfg.dt,
                experiment::gpc_dimension(&cfg)?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
