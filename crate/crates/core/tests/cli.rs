//! End-to-end behaviour of the command-line tool.

use std::path::Path;
use std::process::{Command, Output};

use prefalign::harness::SweepAggregate;
use prefalign::io::{read_dataset, read_json, write_dataset};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefalign")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path) {
    ok(&["generate", "--n", "120", "--rating", "gaussian", "--rating-variance", "0.3", "--seed", "2", "--out", s(dir)]);
}

#[test]
fn rating_families_reject_stripped_data_and_dpo_ignores_ratings() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    generate(&gen);
    let ds = read_dataset(&gen.join("dataset.jsonl")).unwrap();
    let stripped = tmp.path().join("stripped.jsonl");
    write_dataset(&stripped, &ds.strip_ratings()).unwrap();
    let env = gen.join("env.json");

    let out = run(&[
        "train", "--env", s(&env), "--data", s(&stripped), "--algorithm", r#"{"family":"RDPO"}"#,
        "--steps", "10", "--out", s(&tmp.path().join("rdpo")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("missing rating at example 0"), "{msg}");

    let mut policies = Vec::new();
    for (name, data) in [("full", gen.join("dataset.jsonl")), ("bare", stripped.clone())] {
        let dir = tmp.path().join(name);
        ok(&[
            "train", "--env", s(&env), "--data", s(&data), "--algorithm", r#"{"family":"DPO"}"#,
            "--steps", "200", "--lr", "2", "--out", s(&dir),
        ]);
        policies.push(std::fs::read(dir.join("policy.json")).unwrap());
    }
    assert_eq!(policies[0], policies[1]);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = run(&["eval", "--env", "/nonexistent/env.json", "--policy", "p.json", "--out", s(tmp.path())]);
    assert_eq!(missing.status.code(), Some(4));
    let bad_alg = tmp.path().join("gen");
    generate(&bad_alg);
    let out = run(&[
        "train", "--env", s(&bad_alg.join("env.json")), "--data", s(&bad_alg.join("dataset.jsonl")),
        "--algorithm", r#"{"family":"NOPE"}"#, "--out", s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let neg = run(&["generate", "--n", "10", "--swap-fraction", "1.5", "--out", s(tmp.path())]);
    assert_eq!(neg.status.code(), Some(2));
}

#[test]
fn eval_reports_zero_gap_for_the_optimum_neighbourhood() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    generate(&gen);
    let env = gen.join("env.json");
    let train_dir = tmp.path().join("pop");
    ok(&[
        "train", "--env", s(&env), "--population", "--algorithm", r#"{"family":"DPO"}"#, "--lr", "1000",
        "--steps", "20000", "--out", s(&train_dir),
    ]);
    let text = ok(&["eval", "--env", s(&env), "--policy", s(&train_dir.join("policy.json")), "--out", s(tmp.path())]);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(report["subopt_gap"].as_f64().unwrap().abs() < 1e-8, "{report}");
}

#[test]
fn sweep_aggregate_matches_results_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = tmp.path().join("plan.json");
    std::fs::write(
        &plan,
        r#"{
  "sweep": {"kind": "ABLATION_BETA1", "values": [0.05, 1.0]},
  "algorithms": [{"family": "DPO"}, {"family": "RDPO"}],
  "seeds": [0, 1, 2],
  "n": 60,
  "train": {"learning_rate": 2.0, "steps": 150, "log_every": 50}
}"#,
    )
    .unwrap();
    let out = tmp.path().join("sweep");
    ok(&["sweep", "--config", s(&plan), "--timing", "--out", s(&out)]);
    assert!(out.join("timing.csv").exists());
    let agg: SweepAggregate = read_json(&out.join("aggregate.json")).unwrap();
    let mut reader = csv::Reader::from_path(out.join("results.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (pi, ai, gap) = (col("point_index"), col("algorithm_index"), col("final_gap"));
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(agg.cells.len(), 4);
    for cell in &agg.cells {
        let gaps: Vec<f64> = rows
            .iter()
            .filter(|r| r[pi] == cell.point_index.to_string() && r[ai] == cell.algorithm_index.to_string())
            .map(|r| r[gap].parse().unwrap())
            .collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert_eq!(gaps.len(), cell.runs_ok);
        assert!((mean - cell.mean_gap).abs() <= 1e-14 * mean.abs().max(1.0), "{mean} vs {}", cell.mean_gap);
    }
    // DPO does not use beta1, so both ablation points give the same cell
    assert_eq!(agg.cells[0].mean_gap, agg.cells[2].mean_gap);
}

#[test]
fn gradcheck_and_bounds_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&[
        "gradcheck", "--algorithm", r#"{"family":"RDPO_PENALIZED","lambda1":1.0,"lambda2":1.0}"#, "--near-kink",
        "--seed", "4", "--out", s(tmp.path()),
    ]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["near_nonsmooth"], true);
    assert_eq!(v["passed"], true);

    let text = ok(&["bounds", "--r-max", "1", "--n", "400", "--err-rating", "0.0", "--out", s(tmp.path())]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["rdpo_bound"].as_f64().unwrap() < v["err_dpo"].as_f64().unwrap());
    assert!(tmp.path().join("bounds.json").exists());
}
