mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{geoiql_bin, random_dataset};
use geo_iql::dataset::{save_dataset, ActionSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(geoiql_bin()).current_dir(dir).args(args).output().unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    let out = run(dir, args);
    out.status.code().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn grid_data(dir: &Path) {
    ok(dir, &["gen-env", "--env", "trap-grid", "--seed", "3", "--episodes", "40", "--out", "d.gqd"]);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(dir, &["precompute", "--dataset", "missing.gqd", "--out", "p.gqp"]), 2);
    assert_eq!(code(dir, &["frobnicate"]), 2);
    assert_eq!(code(dir, &["train", "--mode", "sideways", "--dataset", "d.gqd", "--out", "r"]), 2);
    grid_data(dir);
    assert_eq!(code(dir, &["precompute", "--dataset", "d.gqd", "--k", "0", "--out", "p.gqp"]), 2);
    assert_eq!(code(dir, &["precompute", "--dataset", "d.gqd", "--alpha", "1.5", "--out", "p.gqp"]), 2);
    assert_eq!(code(dir, &["train", "--mode", "geo-iql", "--dataset", "d.gqd", "--out", "r"]), 2);
    assert_eq!(code(dir, &["eval", "--checkpoint", "nothing.gqc", "--dataset", "d.gqd", "--out", "e.json"]), 2);
    assert!(!dir.join("r").exists());
}

#[test]
fn runtime_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    grid_data(dir);
    ok(dir, &["gen-env", "--env", "trap-grid", "--seed", "4", "--episodes", "10", "--out", "other.gqd"]);
    ok(dir, &["precompute", "--dataset", "other.gqd", "--out", "other.gqp"]);
    assert_eq!(code(dir, &["train", "--mode", "geo-iql", "--dataset", "d.gqd", "--penalties", "other.gqp", "--out", "r"]), 1);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    save_dataset(&random_dataset(&mut rng, 60, 3, ActionSpace::Continuous { dim: 2 }), dir.join("c.gqd")).unwrap();
    ok(dir, &["train", "--mode", "iql", "--dataset", "c.gqd", "--steps", "20", "--batch-size", "8", "--hidden", "8,8", "--out", "rc"]);
    assert_eq!(code(dir, &["eval", "--checkpoint", "rc/final.gqc", "--dataset", "c.gqd", "--out", "e.json"]), 1);

    std::fs::write(dir.join("junk.gqd"), b"GQD1 but not really").unwrap();
    assert_eq!(code(dir, &["ingest", "--dataset", "junk.gqd", "--out", "s.json"]), 1);
}

#[test]
fn plot_data_has_one_row_per_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    grid_data(dir);
    ok(dir, &["precompute", "--dataset", "d.gqd", "--lambda-base", "0.1", "--out", "p.gqp"]);
    ok(
        dir,
        &[
            "train", "--mode", "geo-iql", "--dataset", "d.gqd", "--penalties", "p.gqp", "--steps", "60",
            "--checkpoint-interval", "20", "--log-interval", "10", "--batch-size", "16", "--hidden", "8,8", "--out", "run",
        ],
    );
    ok(dir, &["plot-data", "--run", "run", "--dataset", "d.gqd", "--out", "plots"]);
    let q = std::fs::read_to_string(dir.join("plots/q_improvement.csv")).unwrap();
    let lines: Vec<&str> = q.lines().collect();
    assert_eq!(lines[0], "step,delta_q");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("20,") && lines[3].starts_with("60,"));
    let curve = std::fs::read_to_string(dir.join("plots/training_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 7);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    grid_data(dir);
    std::fs::write(dir.join("pre.toml"), "dataset = \"d.gqd\"\nk = 5\nlambda-base = 0.5\nout = \"p.gqp\"\n").unwrap();
    ok(dir, &["precompute", "--config", "pre.toml", "--k", "7"]);
    let echo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("p.gqp.config.json")).unwrap()).unwrap();
    assert_eq!(echo["precompute"]["k"], 7);
    assert_eq!(echo["precompute"]["lambda_base"], 0.5);
    std::fs::write(dir.join("bad.toml"), "kk = 5\n").unwrap();
    assert_eq!(code(dir, &["precompute", "--config", "bad.toml"]), 2);
}

#[test]
fn eval_and_bound_check_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    grid_data(dir);
    ok(dir, &["train", "--mode", "bc", "--dataset", "d.gqd", "--steps", "50", "--batch-size", "16", "--hidden", "8,8", "--out", "run"]);
    ok(
        dir,
        &[
            "eval", "--checkpoint", "run/final.gqc", "--dataset", "d.gqd", "--env-config", "d.gqd.env.json", "--episodes", "3",
            "--seeds", "2", "--action-factors", "2x2", "--out", "e.json", "--csv", "e.csv",
        ],
    );
    let e: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("e.json")).unwrap()).unwrap();
    assert!(e["offline"]["agreement"].is_number());
    assert_eq!(e["online"]["seed_means"].as_array().unwrap().len(), 2);
    assert_eq!(std::fs::read_to_string(dir.join("e.csv")).unwrap().lines().count(), 2);
    assert_eq!(code(dir, &["eval", "--checkpoint", "run/final.gqc", "--dataset", "d.gqd", "--action-factors", "3x3", "--out", "e2.json"]), 1);

    let out = run(
        dir,
        &["bound-check", "--env-config", "d.gqd.env.json", "--dataset", "d.gqd", "--queries", "300", "--fit-steps", "100", "--out", "b.json"],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));
}
