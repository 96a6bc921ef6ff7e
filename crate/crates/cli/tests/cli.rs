use std::f64::consts::E;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kolmogorov::operator::TanhTerm;
use kolmogorov::semigroup::Method;
use kolmogorov_cli::config::{
    CheckName, EvaluateConfig, FieldConfig, GramianConfig, OperatorConfig, ParabolicConfig,
    RunConfig, SolveConfig, VerifyConfig,
};

const TWO_D: &str = r#"{"operator": {"q0": [[1.0]], "a": [[0.0, 0.0], [1.0, 1.0]]}}"#;

fn kolmo(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("run.json");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_kolmo"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Data rows of the CSV section `name` in stdout output.
fn section(text: &str, name: &str) -> Vec<Vec<String>> {
    let mut lines = text
        .lines()
        .skip_while(|l| *l != format!("# {name}"))
        .skip(2);
    let mut rows = Vec::new();
    for l in lines.by_ref() {
        if l.is_empty() || l.starts_with('#') {
            break;
        }
        rows.push(l.split(',').map(str::to_string).collect());
    }
    rows
}

fn full_config() -> RunConfig {
    RunConfig {
        operator: OperatorConfig {
            q0: vec![vec![1.0]],
            a: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            drift: vec![TanhTerm::new(0, 0.7, vec![1.0, 0.5], 0.1)],
            rank_tol: Some(1e-9),
        },
        seed: Some(11),
        budget: Some(500),
        threads: Some(2),
        gramian: Some(GramianConfig {
            times: vec![0.5, 1.0],
        }),
        evaluate: Some(EvaluateConfig {
            field: FieldConfig::Cosine {
                frequency: vec![1.0, -0.5],
                amplitude: 2.0,
                phase: 0.25,
            },
            times: vec![0.1],
            points: vec![vec![0.0, 0.0]],
            methods: vec![Method::Direct, Method::Girsanov],
            derivatives: vec![vec![0], vec![0, 0]],
        }),
        solve: Some(SolveConfig {
            field: FieldConfig::Cusp {
                coordinate: 1,
                theta: 0.5,
            },
            lambda: 1.5,
            points: vec![vec![0.1, 0.2]],
            tol: 1e-3,
            nodes_per_panel: 3,
            residual_step: Some(0.05),
            parabolic: Some(ParabolicConfig {
                g: FieldConfig::Constant { value: 0.0 },
                h: FieldConfig::Constant { value: 1.0 },
                times: vec![0.5],
            }),
        }),
        verify: Some(VerifyConfig {
            checks: vec![CheckName::GramianScaling, CheckName::Smoothing],
            ..VerifyConfig::default()
        }),
    }
}

#[test]
fn config_round_trips_through_json() {
    let cfg = full_config();
    let text = cfg.to_json();
    assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    let minimal = RunConfig::parse(TWO_D).unwrap();
    assert_eq!(RunConfig::parse(&minimal.to_json()).unwrap(), minimal);
    assert!(full_config().validate().is_ok());
}

#[test]
fn unknown_fields_are_rejected() {
    assert!(RunConfig::parse(r#"{"operator": {"q0": [[1]], "a": [[0]], "extra": 1}}"#).is_err());
    assert!(RunConfig::parse(
        r#"{"operator": {"q0": [[1]], "a": [[0]]}, "evaluate": {"field": {"kind": "constant", "value": 1, "x": 2}, "times": [1], "points": [[0]]}}"#
    )
    .is_err());
}

#[test]
fn stalled_rank_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = kolmo(
        dir.path(),
        r#"{"operator": {"q0": [[1.0]], "a": [[0.0, 0.0], [0.0, 0.0]]}}"#,
        &["analyze"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not hypoelliptic"));
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        "not json",
        r#"{"operator": {"q0": [[-1.0]], "a": [[0.0, 0.0], [1.0, 1.0]]}}"#,
        r#"{"operator": {"q0": [[1.0]], "a": [[0.0, 0.0], [1.0, 1.0]]}, "gramian": {"times": [-1.0]}}"#,
        r#"{"operator": {"q0": [[1.0]], "a": [[0.0, 0.0], [1.0, 1.0]]}, "evaluate": {"field": {"kind": "cusp", "coordinate": 5, "theta": 0.5}, "times": [1.0], "points": [[0.0, 0.0]]}}"#,
        r#"{"operator": {"q0": [[1.0]], "a": [[0.0, 0.0], [1.0, 1.0]], "drift": [{"target": 1, "amplitude": 1.0, "weights": [1.0, 0.0]}]}}"#,
    ];
    for cfg in cases {
        let out = kolmo(dir.path(), cfg, &["analyze"]);
        assert_eq!(out.status.code(), Some(2), "{cfg}");
    }
    let missing = Command::new(env!("CARGO_BIN_EXE_kolmo"))
        .arg("analyze")
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn numeric_failures_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = r#"{"operator": {"q0": [[1.0]], "a": [[0.0, 0.0], [1.0, 1.0]]}, "gramian": {"times": [1e-12]}}"#;
    assert_eq!(kolmo(dir.path(), tiny, &["gramian"]).status.code(), Some(3));
    let huge = r#"{"operator": {"q0": [[1.0]], "a": [[0.0, 0.0], [1.0, 1.0]]}, "gramian": {"times": [1000.0]}}"#;
    assert_eq!(kolmo(dir.path(), huge, &["gramian"]).status.code(), Some(3));
}

#[test]
fn analyze_reports_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let out = kolmo(dir.path(), TWO_D, &["analyze", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = section(&stdout(&out), "analyze");
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][..8], ["3", "2", "1", "1", "0", "1", "1", "1.0"]);
    assert_eq!(rows[1][4..7], ["1", "1", "2"]);
    assert_eq!(rows[1][7].parse::<f64>().unwrap(), 1.0 / 3.0);
}

#[test]
fn constant_field_evaluates_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"operator": {"q0": [[1.0]], "a": [[0.0, 0.0], [1.0, 1.0]],
                  "drift": [{"target": 0, "amplitude": 1.0, "weights": [1.0, 0.5]}]},
                  "evaluate": {"field": {"kind": "constant", "value": 1.0}, "times": [0.5],
                               "points": [[0.2, -0.1]], "methods": ["direct"]}}"#;
    let out = kolmo(
        dir.path(),
        cfg,
        &["evaluate", "--budget", "64", "--seed", "5"],
    );
    assert_eq!(out.status.code(), Some(0));
    let rows = section(&stdout(&out), "evaluate");
    assert_eq!(rows.len(), 1);
    assert_eq!(
        rows[0],
        ["5", "value", "direct", "0.5", "1", "0.2", "-0.1", "1.0", "0.0", "64"]
    );
}

#[test]
fn gramian_at_unit_time_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"operator": {"q0": [[1.0]], "a": [[0.0, 0.0], [1.0, 1.0]]}, "gramian": {"times": [1.0]}}"#;
    let out = kolmo(dir.path(), cfg, &["gramian"]);
    assert_eq!(out.status.code(), Some(0));
    let expected = [1.0, E - 2.0, E - 2.0, (E * E - 1.0) / 2.0 - 2.0 * E + 3.0];
    let rows = section(&stdout(&out), "gramian");
    assert_eq!(rows.len(), 4);
    for (row, want) in rows.iter().zip(expected) {
        let got: f64 = row[4].parse().unwrap();
        assert!(((got - want) / want).abs() < 1e-10, "{row:?}");
    }
}

#[test]
fn verify_passes_on_the_two_dimensional_example() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = kolmo(
        dir.path(),
        TWO_D,
        &["verify", "--out", out_dir.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0));
    let reports = fs::read_to_string(out_dir.join("verify_reports.csv")).unwrap();
    let mut lines = reports.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,name,kind,expected,measured,tolerance,r2,pass,budgets,note"
    );
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 6);
    assert!(rows.iter().any(|r| r.contains("whitened_direction[i=2]")));
    assert!(rows.iter().all(|r| r.contains(",true,")), "{reports}");
    assert!(out_dir.join("verify_tables.csv").exists());
}

#[test]
fn json_output_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = kolmo(dir.path(), TWO_D, &["verify", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let reports = v["verify_reports"].as_array().unwrap();
    assert!(reports
        .iter()
        .all(|r| r["pass"] == serde_json::Value::Bool(true)));
    assert_eq!(reports[0]["seed"], 0);
}

#[test]
fn solve_reports_trivial_resolvent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"operator": {"q0": [[1.0]], "a": [[0.0, 0.0], [1.0, 1.0]]},
                  "solve": {"field": {"kind": "constant", "value": 1.0}, "lambda": 2.0, "tol": 1e-6,
                            "points": [[0.0, 0.0]],
                            "parabolic": {"g": {"kind": "constant", "value": 0.0},
                                          "h": {"kind": "constant", "value": 1.0}, "times": [0.3]}}}"#;
    let out = kolmo(dir.path(), cfg, &["solve", "--budget", "16"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = section(&stdout(&out), "solve");
    let value = |r: &Vec<String>| r[7].parse::<f64>().unwrap();
    let stderr = |r: &Vec<String>| r[8].parse::<f64>().unwrap();
    let bias = |r: &Vec<String>| r[10].parse::<f64>().unwrap();
    assert_eq!(rows[0][1], "elliptic");
    assert!((value(&rows[0]) - 0.5).abs() <= 4.0 * stderr(&rows[0]) + bias(&rows[0]) + 1e-12);
    assert_eq!(rows[1][1], "parabolic");
    assert!((value(&rows[1]) - 0.3).abs() <= 1e-9);
}
