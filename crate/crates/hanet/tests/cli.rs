//! Black-box checks of the binary: command wiring, exit codes, idempotent
//! outputs.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hanet"))
}

fn run_ok(args: &[&str], cwd: &Path) {
    let out = bin().args(args).current_dir(cwd).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_command_chain_runs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();

    run_ok(
        &[
            "gen-synthetic",
            "--types",
            "6",
            "--per-type",
            "24",
            "--seed",
            "7",
            "--vocab-size",
            "40",
            "--out",
            "c.jsonl",
        ],
        cwd,
    );
    let corpus_a = std::fs::read(cwd.join("c.jsonl")).unwrap();
    run_ok(
        &[
            "gen-synthetic",
            "--types",
            "6",
            "--per-type",
            "24",
            "--seed",
            "7",
            "--vocab-size",
            "40",
            "--out",
            "c.jsonl",
        ],
        cwd,
    );
    assert_eq!(corpus_a, std::fs::read(cwd.join("c.jsonl")).unwrap());

    run_ok(
        &[
            "build",
            "--corpus",
            "c.jsonl",
            "--tasks",
            "3",
            "--way",
            "2",
            "--base-shots",
            "6",
            "--shots",
            "2",
            "--seed",
            "7",
            "--dev-per-type",
            "2",
            "--test-per-type",
            "4",
            "--out",
            "bench",
        ],
        cwd,
    );
    assert!(cwd.join("bench/manifest.json").exists());
    assert!(cwd.join("bench/task_03.json").exists());

    std::fs::write(
        cwd.join("cfg.json"),
        r#"{"epochs": 1, "hidden_dim": 8, "ff_dim": 12, "n_syn": 2}"#,
    )
    .unwrap();

    run_ok(
        &[
            "train",
            "--benchmark",
            "bench",
            "--mode",
            "hanet",
            "--config",
            "cfg.json",
            "--seeds",
            "1,2",
            "--out",
            "runs_hanet",
        ],
        cwd,
    );
    let report_a = std::fs::read(cwd.join("runs_hanet/seed_1/report.json")).unwrap();
    assert!(cwd
        .join("runs_hanet/seed_1/checkpoints/stage_03.json")
        .exists());
    assert!(cwd.join("runs_hanet/aggregate.txt").exists());
    assert!(cwd.join("runs_hanet/manifest.json").exists());

    // identical invocation rewrites byte-identical reports
    run_ok(
        &[
            "train",
            "--benchmark",
            "bench",
            "--mode",
            "hanet",
            "--config",
            "cfg.json",
            "--seeds",
            "1,2",
            "--out",
            "runs_hanet",
        ],
        cwd,
    );
    assert_eq!(
        report_a,
        std::fs::read(cwd.join("runs_hanet/seed_1/report.json")).unwrap()
    );

    run_ok(
        &[
            "train",
            "--benchmark",
            "bench",
            "--mode",
            "finetune",
            "--config",
            "cfg.json",
            "--seeds",
            "1",
            "--out",
            "runs_ft",
        ],
        cwd,
    );

    run_ok(
        &[
            "report",
            "runs_hanet/seed_1/report.json",
            "runs_hanet/seed_2/report.json",
            "runs_ft/seed_1/report.json",
            "--out",
            "table.txt",
        ],
        cwd,
    );
    let table = std::fs::read_to_string(cwd.join("table.txt")).unwrap();
    assert!(table.contains("hanet"));
    assert!(table.contains("finetune"));
}

#[test]
fn missing_required_flag_is_usage_error_2() {
    let out = bin()
        .args(["gen-synthetic", "--types", "4"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupted_corpus_exits_1_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{ this is not json\n").unwrap();
    let out = bin()
        .args([
            "build",
            "--corpus",
            "bad.jsonl",
            "--tasks",
            "1",
            "--way",
            "1",
            "--base-shots",
            "1",
            "--shots",
            "1",
            "--seed",
            "1",
        ])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 1"), "stderr: {stderr}");
}

#[test]
fn unknown_mode_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--benchmark", "nowhere", "--mode", "bogus"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_refuses_mismatched_benchmarks() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |name: &str, checksum: &str| {
        let report = serde_json::json!({
            "mode": "hanet",
            "seed": 1,
            "benchmark_checksum": checksum,
            "manifest_id": "m",
            "stages": [{
                "stage": 1, "micro_f1": 0.5, "tp": 1, "fp": 1, "fn_": 1,
                "test_size": 3, "per_label": []
            }],
            "overall": 0.5
        });
        std::fs::write(dir.path().join(name), serde_json::to_vec(&report).unwrap()).unwrap();
    };
    mk("a.json", "aaaa");
    mk("b.json", "bbbb");
    let out = bin()
        .args(["report", "a.json", "b.json"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
