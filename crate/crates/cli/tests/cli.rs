use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mjls-pob"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    eprintln!("{}", String::from_utf8_lossy(&out.stdout));
    eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Scalar single-mode system, horizon 2, unknown initial state.
const SCALAR_MODEL: &str = r#"{
  "horizon": 2, "nx": 1, "nu": 1, "nd": 1, "ny": 1, "modes": 1,
  "pi": [1.0], "P": [[1.0]],
  "matrices": [{"A": [[0.9]], "B": [[1.0]], "Bd": [[1.0]], "C": [[1.0]], "Dd": [[0.1]]}]
}"#;

fn scalar_specs(gamma: f64) -> String {
    format!(
        r#"{{
  "avg_quad": [{{
    "label": "energy",
    "A": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]],
    "beta": [0,0,0,0],
    "gamma": {gamma}
  }}],
  "ellitope": {{"Qs": [[[1,0,0],[0,1,0],[0,0,1]]]}}
}}"#
    )
}

#[test]
fn portfolio_example_succeeds() {
    let dir = scratch("portfolio");
    let out = run(bin().args(["portfolio-example", "--out"]).arg(&dir));
    assert_eq!(out.status.code(), Some(0));
    for f in ["model.json", "specs.json", "policy.json", "report.json", "portfolio.json", "boxplot.csv"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "feasible");
}

#[test]
fn negative_level_is_infeasible() {
    let dir = scratch("infeasible");
    fs::write(dir.join("model.json"), SCALAR_MODEL).unwrap();
    fs::write(dir.join("specs.json"), scalar_specs(-1e6)).unwrap();
    let out = run(bin()
        .args(["synthesize", "--memory", "0", "--model"])
        .arg(dir.join("model.json"))
        .arg("--specs")
        .arg(dir.join("specs.json"))
        .arg("--out")
        .arg(dir.join("out")));
    assert_eq!(out.status.code(), Some(2));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "infeasible");
}

#[test]
fn loose_level_is_feasible() {
    let dir = scratch("feasible");
    fs::write(dir.join("model.json"), SCALAR_MODEL).unwrap();
    fs::write(dir.join("specs.json"), scalar_specs(100.0)).unwrap();
    let out = run(bin()
        .args(["synthesize", "--memory", "1", "--deterministic-solver", "--model"])
        .arg(dir.join("model.json"))
        .arg("--specs")
        .arg(dir.join("specs.json"))
        .arg("--out")
        .arg(&dir));
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.join("policy.json").exists());
}

#[test]
fn malformed_json_reports_position() {
    let dir = scratch("malformed");
    fs::write(dir.join("model.json"), "{\n  \"horizon\": 2,\n  \"nx\": ,\n}").unwrap();
    fs::write(dir.join("specs.json"), scalar_specs(1.0)).unwrap();
    let out = run(bin()
        .args(["synthesize", "--memory", "0", "--model"])
        .arg(dir.join("model.json"))
        .arg("--specs")
        .arg(dir.join("specs.json"))
        .arg("--out")
        .arg(dir.join("out")));
    assert_eq!(out.status.code(), Some(4));
    let diag: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(diag["error"], "parse");
    assert_eq!(diag["line"], 3);
    assert_eq!(diag["column"], 9);
}

#[test]
fn policy_shape_mismatch_exits_4() {
    let dir = scratch("mismatch");
    fs::write(dir.join("model.json"), SCALAR_MODEL).unwrap();
    // three-step policy for a two-step model
    let policy = r#"{"basis": "purified", "horizon": 3, "memory": 0, "modes": 1, "nu": 1, "ny": 1,
        "table": []}"#;
    fs::write(dir.join("policy.json"), policy).unwrap();
    let out = run(bin()
        .args(["simulate", "--samples", "3", "--seed", "1", "--model"])
        .arg(dir.join("model.json"))
        .arg("--policy")
        .arg(dir.join("policy.json"))
        .arg("--out")
        .arg(dir.join("out")));
    assert_eq!(out.status.code(), Some(4));
}

fn write_zero_policy(dir: &std::path::Path) {
    let policy = r#"{"basis": "purified", "horizon": 2, "memory": 0, "modes": 1, "nu": 1, "ny": 1, "table": []}"#;
    fs::write(dir.join("policy.json"), policy).unwrap();
}

fn simulate(dir: &std::path::Path, out: &str, seed: &str) -> Output {
    run(bin()
        .args(["simulate", "--samples", "25", "--seed", seed, "--model"])
        .arg(dir.join("model.json"))
        .arg("--policy")
        .arg(dir.join("policy.json"))
        .arg("--specs")
        .arg(dir.join("specs.json"))
        .arg("--out")
        .arg(dir.join(out)))
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = scratch("determinism");
    fs::write(dir.join("model.json"), SCALAR_MODEL).unwrap();
    fs::write(dir.join("specs.json"), scalar_specs(100.0)).unwrap();
    write_zero_policy(&dir);
    assert_eq!(simulate(&dir, "a", "7").status.code(), Some(0));
    assert_eq!(
        run(bin()
            .env("ROBUST_POB_THREADS", "1")
            .args(["simulate", "--samples", "25", "--seed", "7", "--model"])
            .arg(dir.join("model.json"))
            .arg("--policy")
            .arg(dir.join("policy.json"))
            .arg("--specs")
            .arg(dir.join("specs.json"))
            .arg("--out")
            .arg(dir.join("b")))
        .status
        .code(),
        Some(0)
    );
    assert_eq!(simulate(&dir, "c", "8").status.code(), Some(0));
    let a = fs::read(dir.join("a/trajectories.csv")).unwrap();
    let b = fs::read(dir.join("b/trajectories.csv")).unwrap();
    let c = fs::read(dir.join("c/trajectories.csv")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_policy_zero_uncertainty_is_constant() {
    let dir = scratch("constant");
    // identity dynamics, known zero initial state, zero disturbance gains
    let model = r#"{
      "horizon": 3, "nx": 1, "nu": 1, "nd": 1, "ny": 1, "modes": 2,
      "pi": [0.5, 0.5], "P": [[0.5, 0.5], [0.5, 0.5]], "x0_known": [0.0],
      "matrices": [
        {"A": [[1.0]], "B": [[1.0]], "Bd": [[0.0]], "C": [[1.0]], "Dd": [[0.0]]},
        {"A": [[1.0]], "B": [[2.0]], "Bd": [[0.0]], "C": [[1.0]], "Dd": [[0.0]]}
      ]
    }"#;
    fs::write(dir.join("model.json"), model).unwrap();
    let policy = r#"{"basis": "purified", "horizon": 3, "memory": 0, "modes": 2, "nu": 1, "ny": 1, "table": []}"#;
    fs::write(dir.join("policy.json"), policy).unwrap();
    let out = run(bin()
        .args(["simulate", "--samples", "10", "--seed", "2", "--model"])
        .arg(dir.join("model.json"))
        .arg("--policy")
        .arg(dir.join("policy.json"))
        .arg("--out")
        .arg(dir.join("out")));
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.join("out/trajectories.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        // the terminal row carries x_N only
        for v in fields[3..].iter().filter(|v| !v.is_empty()) {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{line}");
        }
        rows += 1;
    }
    assert_eq!(rows, 40);
}

#[test]
fn verify_passes_and_canary_fails() {
    let out = run(bin().args(["verify", "--seed", "3"]));
    assert_eq!(out.status.code(), Some(0));
    let out = run(bin().args(["verify", "--seed", "3", "--inject-fault", "0"]));
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL linear_recursion"));
}
