//! End-to-end tests of the `spin-lab` binary: flag validation, exit codes,
//! file layouts, determinism, and the verify report.

use std::path::Path;
use std::process::{Command, Output};

use spin_lab::metrics::divergences;
use spin_lab::policy::TabularPolicy;
use spin_lab::task::TargetTask;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_spin-lab")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn init_task_writes_deterministic_file_and_prints_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "init-task",
        "--vocab",
        "4",
        "--prompt-len",
        "1",
        "--resp-len",
        "2",
        "--seed",
        "7",
        "--floor",
        "1e-4",
        "--out",
        "task.json",
    ];
    let first = run_in(dir.path(), &args);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("4 prompts x 16 responses"));
    assert!(stdout(&first).contains("entropy"));

    let mut again = args;
    again[12] = "task2.json";
    assert!(run_in(dir.path(), &again).status.success());
    assert_eq!(
        std::fs::read(dir.path().join("task.json")).unwrap(),
        std::fs::read(dir.path().join("task2.json")).unwrap()
    );

    let task = TargetTask::load(dir.path().join("task.json")).unwrap();
    assert_eq!(task.spec().num_prompts(), 4);
    assert_eq!(task.spec().num_responses(), 16);
}

#[test]
fn init_task_rejects_infeasible_floor_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "init-task",
            "--vocab",
            "4",
            "--prompt-len",
            "1",
            "--resp-len",
            "2",
            "--seed",
            "7",
            "--floor",
            "0.5",
            "--out",
            "task.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("floor"), "{}", stderr(&out));
    assert!(!dir.path().join("task.json").exists());
}

#[test]
fn seed_flag_is_required() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "init-task",
            "--vocab",
            "2",
            "--prompt-len",
            "1",
            "--resp-len",
            "1",
            "--out",
            "task.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn enumeration_cap_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .args([
            "init-task",
            "--vocab",
            "4",
            "--prompt-len",
            "1",
            "--resp-len",
            "2",
            "--seed",
            "7",
            "--floor",
            "1e-4",
            "--out",
            "task.json",
        ])
        .env("SPIN_LAB_CAP", "10")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("exceeds cap"), "{}", stderr(&out));
}

fn make_task(dir: &Path) {
    let out = run_in(
        dir,
        &[
            "init-task",
            "--vocab",
            "3",
            "--prompt-len",
            "1",
            "--resp-len",
            "2",
            "--seed",
            "7",
            "--floor",
            "0.01",
            "--out",
            "task.json",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn sft_with_zero_epochs_keeps_the_uniform_initializer() {
    let dir = tempfile::tempdir().unwrap();
    make_task(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "sft",
            "--task",
            "task.json",
            "--samples",
            "40",
            "--epochs",
            "0",
            "--seed",
            "1",
            "--out",
            "ckpt.json",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let (policy, _) = TabularPolicy::load_checkpoint(dir.path().join("ckpt.json")).unwrap();
    let task = TargetTask::load(dir.path().join("task.json")).unwrap();
    assert_eq!(policy, TabularPolicy::uniform(task.spec()));
    assert!(dir.path().join("ckpt.curve.csv").exists());
}

#[test]
fn exact_sft_loss_curve_is_non_increasing_with_plain_gd() {
    let dir = tempfile::tempdir().unwrap();
    make_task(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "sft",
            "--task",
            "task.json",
            "--samples",
            "40",
            "--epochs",
            "1",
            "--seed",
            "1",
            "--out",
            "ckpt.json",
            "--exact",
            "--optimizer",
            "plain_gd",
            "--lr",
            "0.05",
            "--max-steps",
            "500",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(dir.path().join("ckpt.curve.csv")).unwrap();
    let values: Vec<f64> = reader
        .records()
        .map(|r| r.unwrap()[1].parse().unwrap())
        .collect();
    assert!(values.len() >= 100);
    for w in values.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "NLL increased: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn run_validates_lambda_length_before_any_side_effect() {
    let dir = tempfile::tempdir().unwrap();
    make_task(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "sft",
            "--task",
            "task.json",
            "--samples",
            "40",
            "--epochs",
            "1",
            "--seed",
            "1",
            "--out",
            "ckpt.json",
        ],
    );
    assert!(out.status.success());
    let out = run_in(
        dir.path(),
        &[
            "run",
            "--task",
            "task.json",
            "--init",
            "ckpt.json",
            "--iters",
            "4",
            "--lambda",
            "0.1,0.1",
            "--pairs",
            "10",
            "--seed",
            "3",
            "--out",
            "exp",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lambda"), "{}", stderr(&out));
    assert!(
        !dir.path().join("exp").exists(),
        "no partial experiment dir"
    );
}

#[test]
fn run_with_zero_iterations_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    make_task(dir.path());
    assert!(run_in(
        dir.path(),
        &[
            "sft",
            "--task",
            "task.json",
            "--samples",
            "40",
            "--epochs",
            "1",
            "--seed",
            "1",
            "--out",
            "ckpt.json",
        ],
    )
    .status
    .success());
    let out = run_in(
        dir.path(),
        &[
            "run",
            "--task",
            "task.json",
            "--init",
            "ckpt.json",
            "--iters",
            "0",
            "--lambda",
            "",
            "--pairs",
            "10",
            "--seed",
            "3",
            "--out",
            "exp",
        ],
    );
    // an empty lambda list cannot parse; pass none instead
    assert_eq!(out.status.code(), Some(2));
    let out = run_in(
        dir.path(),
        &[
            "run",
            "--task",
            "task.json",
            "--init",
            "ckpt.json",
            "--iters",
            "0",
            "--pairs",
            "10",
            "--seed",
            "3",
            "--out",
            "exp",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpts: Vec<_> = std::fs::read_dir(dir.path().join("exp/checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(ckpts, vec!["iter_0.json"]);
    let metrics = std::fs::read_to_string(dir.path().join("exp/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "header plus the t=0 row");
    assert!(!dir.path().join("exp/pairs").exists());
}

#[test]
fn run_accepts_an_inline_task_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "init-task",
            "--vocab",
            "2",
            "--prompt-len",
            "1",
            "--resp-len",
            "1",
            "--seed",
            "9",
            "--floor",
            "0.05",
            "--out",
            "tiny.json",
        ],
    );
    assert!(out.status.success());
    let task = TargetTask::load(dir.path().join("tiny.json")).unwrap();
    TabularPolicy::uniform(task.spec())
        .save_checkpoint(dir.path().join("u.json"), 0)
        .unwrap();
    let out = run_in(
        dir.path(),
        &[
            "run",
            "--vocab",
            "2",
            "--prompt-len",
            "1",
            "--resp-len",
            "1",
            "--task-seed",
            "9",
            "--floor",
            "0.05",
            "--init",
            "u.json",
            "--iters",
            "1",
            "--lambda",
            "1.0",
            "--expectation",
            "exact",
            "--optimizer",
            "plain_gd",
            "--lr",
            "2",
            "--stop-grad-norm",
            "1e-10",
            "--seed",
            "9",
            "--out",
            "exp",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    // the synthesized inline task is the same seeded task init-task writes
    assert_eq!(
        std::fs::read(dir.path().join("tiny.json")).unwrap(),
        std::fs::read(dir.path().join("exp/task.json")).unwrap()
    );

    // neither --task nor an inline spec is an error
    let out = run_in(
        dir.path(),
        &[
            "run", "--init", "u.json", "--iters", "1", "--lambda", "1.0", "--seed", "9", "--out",
            "exp2",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_config_file_merges_under_flags_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    make_task(dir.path());
    assert!(run_in(
        dir.path(),
        &[
            "sft",
            "--task",
            "task.json",
            "--samples",
            "40",
            "--epochs",
            "1",
            "--seed",
            "1",
            "--out",
            "ckpt.json",
        ],
    )
    .status
    .success());

    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"iters": 2, "lambda": [1.0, 1.0], "pairs": 10, "epochs": 1, "batch": 8}"#,
    )
    .unwrap();
    // flag --iters 1 wins over config iters 2; lambda falls back to default
    let out = run_in(
        dir.path(),
        &[
            "run",
            "--task",
            "task.json",
            "--init",
            "ckpt.json",
            "--config",
            "cfg.json",
            "--iters",
            "1",
            "--lambda",
            "1.0",
            "--seed",
            "3",
            "--out",
            "exp",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpts = std::fs::read_dir(dir.path().join("exp/checkpoints"))
        .unwrap()
        .count();
    assert_eq!(ckpts, 2, "iters 1 from the flag, not 2 from the config");

    std::fs::write(dir.path().join("bad.json"), r#"{"iters": 2, "warmup": 10}"#).unwrap();
    let out = run_in(
        dir.path(),
        &[
            "run",
            "--task",
            "task.json",
            "--init",
            "ckpt.json",
            "--config",
            "bad.json",
            "--seed",
            "3",
            "--out",
            "exp2",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "unknown key must be rejected");
}

#[test]
fn eval_reports_zero_divergence_for_the_data_policy_and_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    make_task(dir.path());
    let task = TargetTask::load(dir.path().join("task.json")).unwrap();
    let at_data = TabularPolicy::from_distribution(task.data_dist()).unwrap();
    at_data
        .save_checkpoint(dir.path().join("data_ckpt.json"), 0)
        .unwrap();
    let out = run_in(
        dir.path(),
        &["eval", "--ckpt", "data_ckpt.json", "--task", "task.json"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for line in text.lines().filter(|l| l.contains('=')) {
        let value: f64 = line.split('=').nth(1).unwrap().trim().parse().unwrap();
        assert!(value.abs() <= 1e-10, "expected ~0, got {line}");
    }

    // uniform policy vs the skewed task: stdout matches the oracle value
    let uniform = TabularPolicy::uniform(task.spec());
    uniform
        .save_checkpoint(dir.path().join("uniform_ckpt.json"), 0)
        .unwrap();
    let expected = divergences(
        task.data_dist(),
        &uniform.induced_distribution(),
        task.prompt_dist(),
    )
    .unwrap()
    .kl_data_model;
    let out = run_in(
        dir.path(),
        &[
            "eval",
            "--ckpt",
            "uniform_ckpt.json",
            "--task",
            "task.json",
            "--csv",
            "eval.csv",
        ],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    let line = text
        .lines()
        .find(|l| l.starts_with("kl(data||model)"))
        .unwrap();
    let value: f64 = line.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!((value - expected).abs() <= 1e-9, "{value} vs {expected}");
    let csv_text = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(csv_text.starts_with("prompt,kl_data_model,kl_model_data,jsd,tv"));
}

#[test]
fn eval_rejects_mismatched_specs_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    make_task(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "init-task",
            "--vocab",
            "2",
            "--prompt-len",
            "1",
            "--resp-len",
            "1",
            "--seed",
            "1",
            "--floor",
            "0.01",
            "--out",
            "small_task.json",
        ],
    );
    assert!(out.status.success());
    let small = TargetTask::load(dir.path().join("small_task.json")).unwrap();
    TabularPolicy::uniform(small.spec())
        .save_checkpoint(dir.path().join("small_ckpt.json"), 0)
        .unwrap();
    let out = run_in(
        dir.path(),
        &["eval", "--ckpt", "small_ckpt.json", "--task", "task.json"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_all_passes_with_at_least_seven_named_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["verify", "--suite", "all", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    let checks = report.as_array().unwrap();
    assert!(checks.len() >= 7, "only {} checks", checks.len());
    for c in checks {
        assert_eq!(c["status"], "pass", "check failed: {c}");
        assert!(c["check_name"].as_str().unwrap().len() > 3);
        assert!(c.get("measured").is_some());
        assert!(c.get("bound").is_some());
        assert!(c.get("tolerance").is_some());
    }
}

#[test]
fn verify_scalar_min_suite_includes_the_ln2_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "verify", "--suite", "lemmaA.1", "--seed", "7", "--out", "r.json",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    let names: Vec<&str> = report
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["check_name"].as_str().unwrap())
        .collect();
    assert!(names.iter().any(|n| n.contains("two-one-argmin")));
}

#[test]
fn verify_rejects_malformed_suite_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["verify", "--suite", "thm9.9", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown suite"));
}

#[test]
fn compare_emits_the_documented_schema_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    make_task(dir.path());
    assert!(run_in(
        dir.path(),
        &[
            "sft",
            "--task",
            "task.json",
            "--samples",
            "30",
            "--epochs",
            "1",
            "--seed",
            "1",
            "--out",
            "ckpt.json",
        ],
    )
    .status
    .success());
    let args = [
        "compare",
        "--task",
        "task.json",
        "--init",
        "ckpt.json",
        "--iters",
        "2",
        "--lambda",
        "1.0,1.0",
        "--pairs",
        "20",
        "--epochs",
        "1",
        "--batch",
        "8",
        "--seed",
        "3",
        "--out",
        "cmp.csv",
    ];
    let out = run_in(dir.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "method,budget_steps,kl_data_model");
    let mut methods = std::collections::BTreeSet::new();
    let mut spin_rows = Vec::new();
    let mut dpo_rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3);
        methods.insert(fields[0].to_string());
        if fields[0] == "spin" {
            spin_rows.push((fields[1].to_string(), fields[2].to_string()));
        }
        if fields[0] == "dpo" {
            dpo_rows.push((fields[1].to_string(), fields[2].to_string()));
        }
    }
    assert_eq!(
        methods.into_iter().collect::<Vec<_>>(),
        vec!["dpo", "sft_extended", "spin"]
    );
    // beta = first lambda and shared seed: DPO matches SPIN at the first
    // budget point exactly
    assert_eq!(spin_rows[1], dpo_rows[1]);

    let mut again = args;
    again[18] = "cmp2.csv";
    assert!(run_in(dir.path(), &again).status.success());
    let text2 = std::fs::read_to_string(dir.path().join("cmp2.csv")).unwrap();
    assert_eq!(text, text2);
}
