//! End-to-end CLI tests: subcommands, JSON outputs, and the exit-code
//! contract (0 ok, 1 usage, 2 i/o, 3 prerequisite, 4 numeric).

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn spotfast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spotfast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn gen_tiny(dir: &Path) -> serde_json::Value {
    let out = spotfast(&[
        "gen-data",
        "--classes",
        "3",
        "--per-class",
        "2",
        "--seed",
        "5",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    stdout_json(&out)
}

#[test]
fn gen_data_reports_counts_and_detects_unchanged_reruns() {
    let dir = tempdir().unwrap();
    let first = gen_tiny(dir.path());
    assert_eq!(first["clip_count"], 6);
    assert_eq!(first["num_classes"], 3);
    assert_eq!(first["unchanged"], false);

    let second = gen_tiny(dir.path());
    assert_eq!(second["unchanged"], true);
    assert_eq!(second["files_written"], 0);
}

#[test]
fn gen_data_unwritable_destination_exits_2() {
    let out = spotfast(&[
        "gen-data",
        "--classes",
        "2",
        "--per-class",
        "1",
        "--out",
        "/proc/definitely/not/writable",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn window_stats_reproduces_reference_windows() {
    let out = spotfast(&["window-stats", "--mean", "10.59", "--std", "3.2"]);
    assert!(out.status.success());
    let json = stdout_json(&out);
    assert_eq!(json["windows"], serde_json::json!([15, 19, 23]));

    let out = spotfast(&["window-stats", "--mean", "8.2", "--std", "2.6"]);
    assert_eq!(stdout_json(&out)["windows"], serde_json::json!([11, 15, 17]));
}

#[test]
fn window_stats_reads_boundaries_from_a_dataset() {
    let dir = tempdir().unwrap();
    gen_tiny(dir.path());
    let out = spotfast(&[
        "window-stats",
        "--data",
        dir.path().to_str().unwrap(),
        "--split",
        "train",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    assert_eq!(json["count"], 6);
    let windows = json["windows"].as_array().unwrap();
    assert_eq!(windows.len(), 3);
    for w in windows {
        let w = w.as_u64().unwrap();
        assert!(w % 2 == 1 && w <= 29);
    }
}

#[test]
fn training_pipeline_trains_evaluates_and_enforces_prerequisites() {
    let data = tempdir().unwrap();
    gen_tiny(data.path());
    let out_dir = tempdir().unwrap();
    let config = out_dir.path().join("desk.toml");
    std::fs::write(
        &config,
        "preset = \"desk\"\nnum_classes = 3\n\n[phase1]\nepochs = 1\n",
    )
    .unwrap();

    // phase 2 before phase 1: prerequisite failure naming the missing file
    let out = spotfast(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--phase",
        "2",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("phase1_final.sfckpt"), "{stderr}");

    // phase 1 trains
    let out = spotfast(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--phase",
        "1",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    assert_eq!(json["phase"], 1);
    assert!(out_dir.path().join("metrics_phase1.jsonl").exists());
    let ckpt = out_dir.path().join("phase1_final.sfckpt");
    assert!(ckpt.exists());

    // evaluation on the checkpoint
    let out = spotfast(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.path().to_str().unwrap(),
        "--split",
        "val",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let acc = stdout_json(&out)["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn invalid_config_keys_exit_1_with_the_offending_path() {
    let data = tempdir().unwrap();
    let out_dir = tempdir().unwrap();
    let config = out_dir.path().join("bad.toml");
    std::fs::write(&config, "preset = \"desk\"\nmystery = 1\n").unwrap();
    let out = spotfast(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--phase",
        "1",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));
}

#[test]
fn usage_errors_exit_1() {
    let out = spotfast(&["train", "--phase", "9"]);
    assert_eq!(out.status.code(), Some(1));
    let out = spotfast(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_keys_enumerates_the_schema_with_defaults() {
    let out = spotfast(&["config-keys"]);
    assert!(out.status.success());
    let json = stdout_json(&out);
    let keys: Vec<&str> = json["config_keys"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["key"].as_str().unwrap())
        .collect();
    for expected in ["preset", "window_size", "memory_n_keys", "phaseN.lr0"] {
        assert!(keys.contains(&expected), "missing {expected}");
    }
    // paper defaults are carried along
    let rows = json["config_keys"].as_array().unwrap();
    let lr = rows.iter().find(|r| r["key"] == "phaseN.lr0").unwrap();
    assert!(lr["paper_default"].as_str().unwrap().contains("0.00025"));
}

#[test]
fn train_help_lists_config_keys() {
    let out = spotfast(&["train", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Config-file keys"), "{text}");
    assert!(text.contains("memory_n_keys"));
}
