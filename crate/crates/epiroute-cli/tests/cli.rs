//! End-to-end checks of the command-line surface: exit codes, strict config
//! validation, CSV round-trips, and byte-identical reruns.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicU64, Ordering};

static DIR_COUNTER: AtomicU64 = AtomicU64::new(0);

fn work_dir(tag: &str) -> PathBuf {
    let id = DIR_COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!(
        "epiroute-cli-test-{}-{tag}-{id}",
        std::process::id()
    ));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epiroute"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn base_config(policy: &str) -> String {
    format!(
        r#"{{
  "schema_version": 1,
  "model": {{
    "max_energy": 4, "transmit_cost": 2, "receive_cost": 1,
    "contact_rate": 2.0, "destination_contact_rate": 2.0,
    "horizon": 6.0,
    "penalties": [16.0, 9.0, 4.0, 1.0, 0.0],
    "mandated_delivery": 0.8
  }},
  "init": {{
    "susceptible": [0.0, 0.0, 0.3, 0.35, 0.25],
    "infective": [0.0, 0.0, 0.0, 0.0, 0.1]
  }},
  "search": {{ "resolution": 9, "coarse_steps": 120, "refine_steps": 800, "max_evaluations": 6000, "multistart": 3 }}{policy}
}}"#
    )
}

fn parse_csv(path: &PathBuf) -> (Vec<String>, Vec<Vec<Option<f64>>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|line| {
            line.split(',')
                .map(|f| if f.is_empty() { None } else { Some(f.parse::<f64>().unwrap()) })
                .collect()
        })
        .collect();
    (header, rows)
}

#[test]
fn simulate_zero_policy_keeps_states_constant_and_round_trips() {
    let dir = work_dir("simulate");
    let cfg = dir.join("config.json");
    fs::write(&cfg, base_config(r#", "policy": { "kind": "zero" }"#)).unwrap();
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "simulate",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let (header, rows) = parse_csv(&dir.join("trajectory.csv"));
    assert_eq!(header[0], "t");
    let s2 = header.iter().position(|h| h == "S2").unwrap();
    let i4 = header.iter().position(|h| h == "I4").unwrap();
    for row in &rows {
        assert_eq!(row[s2], Some(0.3));
        assert_eq!(row[i4], Some(0.1));
    }

    // Recomputing the delivery probability from the CSV's final exposure
    // matches the summary.
    let e_col = header.iter().position(|h| h == "E").unwrap();
    let final_e = rows.last().unwrap()[e_col].unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    let reported = summary["delivery_probability"].as_f64().unwrap();
    let recomputed = 1.0 - (-2.0 * final_e).exp();
    assert!((reported - recomputed).abs() <= 1e-9);
    assert_eq!(summary["unbiased_cost"].as_f64().unwrap(), 0.0);
}

#[test]
fn unknown_config_keys_are_rejected_with_exit_2() {
    let dir = work_dir("unknown-key");
    let cfg = dir.join("config.json");
    let bad = base_config("").replace(r#""schema_version": 1,"#, r#""schema_version": 1, "bogus": 3,"#);
    fs::write(&cfg, bad).unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "simulate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_model_is_rejected_with_exit_2() {
    let dir = work_dir("invalid-model");
    let cfg = dir.join("config.json");
    // receive cost above transmit cost violates the cost ordering.
    let bad = base_config("").replace(r#""transmit_cost": 2, "receive_cost": 1"#, r#""transmit_cost": 1, "receive_cost": 2"#);
    fs::write(&cfg, bad).unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "simulate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infeasible_mandate_exits_3() {
    let dir = work_dir("infeasible");
    let cfg = dir.join("config.json");
    let hard = base_config("")
        .replace(r#""horizon": 6.0"#, r#""horizon": 0.05"#)
        .replace(r#""mandated_delivery": 0.8"#, r#""mandated_delivery": 0.95"#);
    fs::write(&cfg, hard).unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "optimize"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn optimize_with_verification_attaches_a_passing_report() {
    let dir = work_dir("optimize");
    let cfg = dir.join("config.json");
    fs::write(&cfg, base_config("")).unwrap();
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "optimize",
        "--verify",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["report"]["feasible"], serde_json::Value::Bool(true));
    assert_eq!(summary["verification"]["status"], "pass");
    assert!(summary["delivery_probability"].as_f64().unwrap() >= 0.8 - 1e-9);
}

#[test]
fn heuristic_one_is_echoed_back() {
    let dir = work_dir("heuristic");
    let cfg = dir.join("config.json");
    fs::write(&cfg, base_config("").replace(r#""mandated_delivery": 0.8"#, r#""mandated_delivery": 0.5"#))
        .unwrap();
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "heuristic",
        "one",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["report"]["policy"]["kind"], "one");
}

#[test]
fn montecarlo_runs_are_byte_identical_for_the_same_seed() {
    let dir_a = work_dir("mc-a");
    let dir_b = work_dir("mc-b");
    let cfg = dir_a.join("config.json");
    let with_mc = base_config(
        r#", "policy": { "kind": "threshold", "params": [1.0, 2.0, 3.0] },
  "mc": { "n_nodes": 60, "runs": 12, "contact": { "kind": "exponential" }, "clock_error": 0.2, "energy_error": 0.1 }"#,
    );
    fs::write(&cfg, with_mc).unwrap();
    for dir in [&dir_a, &dir_b] {
        let out = run(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            "42",
            "montecarlo",
        ]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(dir_a.join("mc.csv")).unwrap();
    let b = fs::read(dir_b.join("mc.csv")).unwrap();
    assert_eq!(a, b);
    let a = fs::read(dir_a.join("summary.json")).unwrap();
    let b = fs::read(dir_b.join("summary.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_sweep_exits_2() {
    let dir = work_dir("empty-sweep");
    let cfg = dir.join("config.json");
    let with_exp = base_config(
        r#", "mc": { "n_nodes": 40, "runs": 4, "contact": { "kind": "exponential" } },
  "experiment": { "p_values": [] }"#,
    );
    fs::write(&cfg, with_exp).unwrap();
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "experiment",
        "validation",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validation_experiment_emits_result_table() {
    let dir = work_dir("validation");
    let cfg = dir.join("config.json");
    let with_exp = base_config(
        r#", "mc": { "n_nodes": 50, "runs": 6, "contact": { "kind": "exponential" } },
  "experiment": { "p_values": [0.0, 0.6] }"#,
    );
    fs::write(&cfg, with_exp).unwrap();
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "7",
        "experiment",
        "validation",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = parse_csv(&dir.join("result.csv"));
    assert_eq!(header[0], "p");
    assert_eq!(rows.len(), 2);
    // Zero mandate: the optimizer keeps everything frozen, zero cost delta.
    assert_eq!(rows[0][1], Some(0.0));
}

#[test]
fn missing_policy_for_simulate_exits_2() {
    let dir = work_dir("no-policy");
    let cfg = dir.join("config.json");
    fs::write(&cfg, base_config("")).unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "simulate"]);
    assert_eq!(out.status.code(), Some(2));
}
