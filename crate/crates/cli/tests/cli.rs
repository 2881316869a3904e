use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_volex");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn volex(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("VOLEX_SEED")
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn small_experiment(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        r#"
seed = 1

[paths]
rho = 2.0
epsilon = 0.5

[experiment]
u_bar = 100.0
sigma = 0.3
rhos = [2.0]
epsilons = [0.0, 0.5, 1.0]
n_paths = 400
n_steps = 100

[experiment.params]
kappa = 0.0001
kappa_tilde = 0.01
horizon = 1.0
x0 = 10.0
"#,
    )
    .unwrap();
    path
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn missing_config_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let out = volex(&[
        "simulate",
        "--config",
        missing.to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope.toml"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[experiment]\nwhat = 1\n").unwrap();
    let out = volex(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_experiment(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for dir in [&a, &b] {
        let out = volex(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = volex(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "8",
        "--out-dir",
        c.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    for name in ["sweep.csv", "paths.csv"] {
        assert_eq!(read(&a, name), read(&b, name), "{name}");
        assert_ne!(read(&a, name), read(&c, name), "{name}");
    }
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_experiment(tmp.path());
    let run = |dir: &str, flag: Option<&str>, env: Option<&str>| {
        let out_dir = tmp.path().join(dir);
        let mut cmd = Command::new(BIN);
        cmd.args([
            "--quiet",
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ])
        .env_remove("VOLEX_SEED");
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        if let Some(s) = env {
            cmd.env("VOLEX_SEED", s);
        }
        assert!(cmd.status().unwrap().success());
        read(&out_dir, "sweep.csv")
    };
    let from_config = run("cfg", None, None);
    let flag_one = run("flag1", Some("1"), None);
    let env_five = run("env5", None, Some("5"));
    let flag_five = run("flag5", Some("5"), None);
    let flag_over_env = run("both", Some("1"), Some("5"));
    assert_eq!(from_config, flag_one);
    assert_eq!(env_five, flag_five);
    assert_ne!(env_five, from_config);
    assert_eq!(flag_over_env, flag_one);
}

#[test]
fn thread_count_does_not_change_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_experiment(tmp.path());
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let dir = tmp.path().join(threads);
        let out = volex(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--threads",
            threads,
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        outputs.push((read(&dir, "sweep.csv"), read(&dir, "paths.csv")));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn manifest_lists_every_output_with_its_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_experiment(tmp.path());
    let dir = tmp.path().join("run");
    assert!(volex(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap()
    ])
    .status
    .success());
    let manifest: serde_json::Value = serde_json::from_slice(&read(&dir, "manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config"]["experiment"]["n_paths"], 400);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 2);
    for o in outputs {
        let bytes = read(&dir, o["path"].as_str().unwrap());
        assert_eq!(o["bytes"], bytes.len());
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
        assert_eq!(o["sha256"], hex::encode(h.finalize()));
    }
}

#[test]
fn bundled_sweep_has_three_strategies_for_eleven_epsilons() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("ou_sweep_rho0.3.toml")).unwrap();
    assert!(text.contains("n_paths = 50000"));
    let cfg = tmp.path().join("quick.toml");
    std::fs::write(
        &cfg,
        text.replace("n_paths = 50000", "n_paths = 50")
            .replace("n_steps = 500", "n_steps = 50"),
    )
    .unwrap();
    let out = volex(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(read(tmp.path(), "sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epsilon,rho,strategy,J,IS,stderr,n_paths"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 33);
    for s in ["static", "adaptive", "anticipating"] {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(2) == Some(s)).count(), 11);
    }
}

#[test]
fn bs_validation_reports_closed_form_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("bs_validation.toml");
    let out = volex(&[
        "pde",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("rel error"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&read(tmp.path(), "pde_report.json")).unwrap();
    assert_eq!(report["monotone"], true);
    let points = report["points"].as_array().unwrap();
    assert_eq!(points.len(), 3);
    let mut last = 0.0;
    for p in points {
        assert!(p["closed_form_rel_error"].as_f64().unwrap() < 1e-3);
        let j = p["j"].as_f64().unwrap();
        assert!(j >= last);
        last = j;
    }
    let csv = String::from_utf8(read(tmp.path(), "lambda_sweep.csv")).unwrap();
    assert!(csv.starts_with("lambda,J\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn empty_lambda_list_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("empty.toml");
    std::fs::write(
        &cfg,
        r#"
[pde]
lambdas = []
x0 = 10.0
grid = { horizon = 1.0, n_t = 100, n_y = 51 }
model = { kind = "constant", v_bar = 100.0 }
"#,
    )
    .unwrap();
    let out = volex(&[
        "pde",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambdas"));
}

#[test]
fn permanent_impact_config_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("permanent_impact.toml");
    let out = volex(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&read(tmp.path(), "permanent_impact.json")).unwrap();
    assert_eq!(report["regime"], "oscillatory");
    assert!(report["cost"].as_f64().unwrap() < report["twap_cost"].as_f64().unwrap());
}

#[test]
fn figures_merges_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_experiment(tmp.path());
    for run in ["r1", "r2"] {
        let dir = tmp.path().join("runs").join(run);
        assert!(volex(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            dir.to_str().unwrap()
        ])
        .status
        .success());
    }
    let runs = tmp.path().join("runs");
    let merged = tmp.path().join("merged");
    let out = volex(&[
        "figures",
        "--dir",
        runs.to_str().unwrap(),
        "--out-dir",
        merged.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let costs = String::from_utf8(read(&merged, "figure_costs.csv")).unwrap();
    assert!(costs.starts_with(
        "run,rho,epsilon,IS_static,stderr_static,IS_adaptive,stderr_adaptive,IS_anticipating,stderr_anticipating\n"
    ));
    assert_eq!(costs.lines().count(), 1 + 2 * 3);
    let paths = String::from_utf8(read(&merged, "figure_paths.csv")).unwrap();
    assert_eq!(paths.lines().count(), 1 + 2 * 101);

    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = volex(&[
        "figures",
        "--dir",
        empty.to_str().unwrap(),
        "--out-dir",
        merged.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
