use std::path::Path;
use std::process::{Command, Output};

use corap::data::{Dataset, Example, Role};
use corap::evaluators::ToyScorer;
use corap::generation::CandidateLaw;
use serde_json::Value;

fn corap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corap"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    corap(args, cwd).status.code().unwrap()
}

fn planted(dir: &Path) {
    assert_eq!(code(&["planted", "--out", "u"], dir), 0);
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["--help"], dir.path()), 0);
    assert_eq!(code(&["--version"], dir.path()), 0);
    assert_eq!(code(&["frobnicate"], dir.path()), 1);
    assert_eq!(code(&["calibrate", "--alpha", "abc"], dir.path()), 1);
}

#[test]
fn missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = corap(&["calibrate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--cal"));
    assert_eq!(code(&["calibrate", "--cal", "nope.jsonl"], dir.path()), 1);
    assert_eq!(code(&["report"], dir.path()), 1);
}

#[test]
fn abstention_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    planted(d);
    let args = [
        "calibrate",
        "--cal",
        "u/calibration.jsonl",
        "--backend",
        "sim:hopeless",
        "--out",
        "h",
    ];
    assert_eq!(code(&args, d), 2);
    let art = json(&d.join("h/calibration.json"));
    assert_eq!(art["abstained"], true);
    assert!(art["chosen"].is_null());
    assert_eq!(
        code(
            &[
                "predict",
                "--calibration",
                "h/calibration.json",
                "--input",
                "u/target.jsonl",
                "--out",
                "h"
            ],
            d
        ),
        2
    );
}

#[test]
fn base_model_covering_target_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    planted(d);
    let scorer = ToyScorer {
        novice: CandidateLaw::perfect(),
        ..ToyScorer::default()
    };
    std::fs::write(
        d.join("scorer.json"),
        serde_json::to_string(&scorer).unwrap(),
    )
    .unwrap();
    let out = corap(
        &[
            "explain",
            "--level",
            "examples",
            "--training",
            "u/training.jsonl",
            "--cal",
            "u/calibration.jsonl",
            "--target",
            "u/target.jsonl",
            "--scorer",
            "scorer.json",
            "--out",
            "x",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(!d.join("x/attribution_examples.json").exists());
}

#[test]
fn steps_level_needs_examples_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    planted(d);
    let args = [
        "explain",
        "--level",
        "steps",
        "--training",
        "u/training.jsonl",
        "--cal",
        "u/calibration.jsonl",
        "--target",
        "u/target.jsonl",
    ];
    assert_eq!(code(&args, d), 1);
}

#[test]
fn config_echo_reproduces_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    planted(d);
    let first = [
        "calibrate",
        "--cal",
        "u/calibration.jsonl",
        "--test",
        "u/target.jsonl",
        "--seed",
        "11",
        "--alpha",
        "0.25",
        "--grid",
        "-inf,-3,-1/-2,-0.5/0.5,0.9",
        "--out",
        "a",
    ];
    assert_eq!(code(&first, d), 0);
    assert_eq!(
        code(
            &["calibrate", "--config", "a/calibration.json", "--out", "b"],
            d
        ),
        0
    );
    for f in ["calibration.json", "calibration_grid.csv"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let art = json(&d.join("a/calibration.json"));
    assert_eq!(art["config"]["alpha"], 0.25);
    assert_eq!(
        art["config"]["grid"]["product"]["lambda1_values"][0],
        "-inf"
    );
    assert!(art["config"].get("out").is_none());
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    planted(d);
    std::fs::write(
        d.join("run.toml"),
        "seed = 5\nalpha = 0.4\ncalibration_data = \"u/calibration.jsonl\"\n",
    )
    .unwrap();
    assert_eq!(
        code(
            &[
                "calibrate",
                "--config",
                "run.toml",
                "--alpha",
                "0.35",
                "--out",
                "o"
            ],
            d
        ),
        0
    );
    let art = json(&d.join("o/calibration.json"));
    assert_eq!(art["config"]["seed"], 5);
    assert_eq!(art["config"]["alpha"], 0.35);
    std::fs::write(d.join("bad.toml"), "alpah = 0.4\n").unwrap();
    assert_eq!(code(&["calibrate", "--config", "bad.toml"], d), 1);
}

#[test]
fn simulate_single_trial() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = [
        "simulate", "--trials", "1", "--n-cal", "40", "--n-test", "5", "--out", "s",
    ];
    assert_eq!(code(&args, d), 0);
    let art = json(&d.join("s/simulation.json"));
    assert_eq!(art["schema"], "corap.simulation/v1");
    assert_eq!(art["trials"].as_array().unwrap().len(), 1);
    let csv = std::fs::read_to_string(d.join("s/coverage.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header, one trial, aggregate");
}

#[test]
fn simulate_with_profile_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let profile = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/moderate_profile.toml");
    let backend = format!("sim:{}", profile.display());
    let args = [
        "simulate",
        "--backend",
        &backend,
        "--trials",
        "4",
        "--n-cal",
        "200",
        "--n-test",
        "20",
        "--epsilon",
        "0.1",
        "--grid",
        "-3,-2,-1/-2,-1,0/0.3,0.6,0.9",
        "--out",
        "s",
    ];
    assert_eq!(code(&args, d), 0);
    let art = json(&d.join("s/simulation.json"));
    for t in art["trials"].as_array().unwrap() {
        if t["abstained"] == false {
            assert!(t["true_risk"].as_f64().unwrap() <= 0.3 + 0.1, "{t}");
        }
    }
}

#[test]
fn predictions_follow_input_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    planted(d);
    let inputs: Vec<Example> = (0..100)
        .rev()
        .map(|i| {
            Example::new(
                format!("q{i:03}"),
                format!("what is {i} plus zero?"),
                vec![format!("{i} stays {i}")],
                i.to_string(),
            )
        })
        .collect();
    let ds = Dataset::new(Role::Test, inputs).unwrap();
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf).unwrap();
    std::fs::write(d.join("inputs.jsonl"), buf).unwrap();
    assert_eq!(
        code(
            &["calibrate", "--cal", "u/calibration.jsonl", "--out", "r"],
            d
        ),
        0
    );
    let pred = [
        "predict",
        "--calibration",
        "r/calibration.json",
        "--input",
        "inputs.jsonl",
        "--out",
        "r",
    ];
    assert_eq!(code(&pred, d), 0);
    let art = json(&d.join("r/predictions.json"));
    let ids: Vec<&str> = art["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["id"].as_str().unwrap())
        .collect();
    let expected: Vec<String> = (0..100).rev().map(|i| format!("q{i:03}")).collect();
    assert_eq!(ids, expected);
}

#[test]
fn wrong_schema_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    planted(d);
    assert_eq!(
        code(
            &["simulate", "--trials", "1", "--n-cal", "20", "--n-test", "2", "--out", "s"],
            d
        ),
        0
    );
    let out = corap(
        &[
            "predict",
            "--calibration",
            "s/simulation.json",
            "--input",
            "u/target.jsonl",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected schema"));
}

#[test]
fn simulate_resamples_calibration_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&["planted", "--n-cal", "60", "--out", "u"], d), 0);
    let args = [
        "simulate", "--cal", "u/calibration.jsonl", "--trials", "3", "--n-cal", "25", "--n-test", "0",
        "--out", "s",
    ];
    assert_eq!(code(&args, d), 0);
    let art = json(&d.join("s/simulation.json"));
    assert_eq!(art["config"]["calibration_data"], "u/calibration.jsonl");
    assert_eq!(art["trials"].as_array().unwrap().len(), 3);
    let too_many = [
        "simulate", "--cal", "u/calibration.jsonl", "--trials", "1", "--n-cal", "61",
    ];
    assert_eq!(code(&too_many, d), 1);
}
