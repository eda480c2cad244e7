use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gpc_ddp_cli::report::SUMMARY_KEYS;
use serde_json::Value;

const SMALL: &str = r#"
model = "duffing"

parameters = [{ kind = "gaussian", mean = 3.0, std = 0.1 }]
initial = [{ kind = "gaussian", mean = 4.0, std = 0.08 }, 0.0]

[basis]
order = 1

[horizon]
t_final = 0.2
dt = 0.01

[cost]
goal = [3.0, 0.0]
terminal_mean = [400.0, 400.0]
terminal_variance = [300.0, 100.0]
control = [0.01]

[solver]
max_iterations = 30

[baselines]
deterministic_ddp = true

[baselines.monte_carlo]
n_samples = 300
seed = 5
"#;

fn gpcddp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpcddp")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.conf");
    std::fs::write(&p, text).unwrap();
    p
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run_into(cfg: &Path, out: &Path, threads: &str) {
    let o = gpcddp(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", threads]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_writes_documented_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    run_into(&cfg, &out, "1");

    let summary: Value = serde_json::from_str(&read(&out, "summary.json")).unwrap();
    let keys: Vec<&str> = summary.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(keys, SUMMARY_KEYS);
    assert_eq!(summary["gpc_dim"], 6);
    assert_eq!(summary["steps"], 20);
    assert_eq!(summary["monte_carlo"]["seed"], 5);

    let traj = read(&out, "trajectory.csv");
    let mut lines = traj.lines();
    assert_eq!(
        lines.next().unwrap(),
        "time,X_0_0,X_0_1,X_0_2,X_1_0,X_1_1,X_1_2,mean_0,mean_1,var_0,var_1,third_0,third_1,u_0"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 21);
    assert!(rows.last().unwrap().ends_with(','), "no control after the last state");

    let conv = read(&out, "convergence.csv");
    assert!(conv.starts_with("iteration,cost,control_distance,gamma,theta,max_qu\n"));
    assert_eq!(conv.lines().count(), 2 + summary["iterations"].as_u64().unwrap() as usize);

    for name in ["gains.csv", "mc.csv", "baseline_trajectory.csv", "baseline_convergence.csv", "baseline_mc.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }
    assert!(read(&out, "mc.csv").starts_with("time,mean_0,mean_1,var_0,var_1,third_0,third_1,se_mean_0"));
}

fn without_wall_time(text: &str) -> Value {
    let mut v: Value = serde_json::from_str(text).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_s");
    v
}

#[test]
fn artifacts_are_deterministic_across_runs_and_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    run_into(&cfg, &dirs[0], "1");
    run_into(&cfg, &dirs[1], "1");
    run_into(&cfg, &dirs[2], "3");
    let mut names: Vec<String> = std::fs::read_dir(&dirs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for other in &dirs[1..] {
        for name in &names {
            let (a, b) = (read(&dirs[0], name), read(other, name));
            if name == "summary.json" {
                assert_eq!(without_wall_time(&a), without_wall_time(&b));
            } else {
                assert!(a == b, "{name} differs in {}", other.display());
            }
        }
    }
}

#[test]
fn seed_flag_changes_monte_carlo_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(gpcddp(&["mc", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    assert!(gpcddp(&["mc", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "6"]).status.success());
    assert_eq!(read(&a, "trajectory.csv"), read(&b, "trajectory.csv"));
    assert_ne!(read(&a, "mc.csv"), read(&b, "mc.csv"));
    assert_eq!(read(&a, "mc.csv").lines().count(), 22);
}

#[test]
fn malformed_dt_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    for bad in ["dt = -0.01", "dt = 0.03", "dt = 0.2"] {
        let cfg = write_config(tmp.path(), &SMALL.replace("dt = 0.01", bad));
        let o = gpcddp(&["check", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("horizon.dt"), "{bad}");
    }
}

#[test]
fn unknown_keys_and_missing_files_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("[basis]", "[basis]\nordr = 2"));
    assert_eq!(gpcddp(&["check", cfg.to_str().unwrap()]).status.code(), Some(2));
    let missing = tmp.path().join("nope.conf");
    assert_eq!(gpcddp(&["run", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn check_reports_dimension() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = gpcddp(&["check", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("gPC state dimension 6"));
}

#[test]
fn sweep_dt_rows_and_rejection() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("sweep");
    let o = gpcddp(&["sweep-dt", cfg.to_str().unwrap(), "--dt", "0.01,0.05", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out, "dt_sweep.csv");
    assert!(csv.starts_with("integrator,dt,termination,iterations,cost,predicted_mean_0"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    // the finest step is its own reference
    for line in csv.lines().skip(1).filter(|l| l.contains(",1.0000000000000000e-2,")) {
        assert!(line.ends_with(",0.0000000000000000e0"), "{line}");
    }

    let single = gpcddp(&["sweep-dt", cfg.to_str().unwrap(), "--dt", "0.01", "--out", out.to_str().unwrap()]);
    assert_eq!(single.status.code(), Some(2));
}

#[test]
fn bundled_configs_validate() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        let o = gpcddp(&["check", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
        n += 1;
    }
    assert!(n >= 3);
}
