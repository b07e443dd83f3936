//! Drives the `dream` binary end to end on a deliberately tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dream_core::harness::{read_csv_rows, read_json_rows};

fn tiny_config(dir: &Path) -> PathBuf {
    let text = format!(
        "\
# small enough to run every stage in seconds
[paths]
dir = {dir}

[model]
d_model = 16
n_heads = 2
target_layers = 4
grid_h = 2
grid_w = 2
max_seq_len = 80

[data]
train_samples = 40
eval_samples = 8
test_samples = 8

[target_train]
steps = 20
batch_size = 2
eval_every = 10

[draft_train]
steps = 10
batch_size = 2
samples = 8

[decode]
max_new_tokens = 12

[bench]
prompts = 3
seeds = 1, 2
timing_runs = 1

[ablate]
prompts = 2
variants = wo-ca, keep-0.25

[profile]
grids = 1x1, 2x2
tokens = 8

[verify]
samples = 40000
greedy_prompts = 5
",
        dir = dir.join("run").display()
    );
    let path = dir.join("tiny.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn dream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dream"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("DREAM_THREADS", "1")
        .output()
        .unwrap()
}

fn run(cfg: &Path, sub: &str, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    dream(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn calibrate_before_target_training_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&cfg, "calibrate", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("cmd_train_target"), "{}", stderr(&out));
    let out = run(&cfg, "train-draft", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("cmd_train_target"), "{}", stderr(&out));
}

#[test]
fn invalid_keys_and_values_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for set in ["no.such_key=1", "decode.keep_fraction=0", "model.n_heads=3", "decode.mode=sideways"] {
        let out = run(&cfg, "profile-flops", &["--set", set]);
        assert_eq!(out.status.code(), Some(1), "{set}: {}", stderr(&out));
    }
    assert_eq!(dream(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(dream(&["--help"]).status.code(), Some(0));
}

#[test]
fn verify_lossless_prints_distances_and_fails_on_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&cfg, "verify-lossless", &[]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout.contains("enumeration tv"), "{stdout}");
    assert!(stdout.contains("monte carlo tv"), "{stdout}");
    let out = run(&cfg, "verify-lossless", &["--set", "verify.mc_tolerance=0"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn profile_flops_writes_monotone_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&cfg, "profile-flops", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("run/reports/profile-flops/report.csv")).unwrap();
    let ratios: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(ratios.len(), 2);
    assert!(ratios[0] > 1.0 && ratios[1] > ratios[0], "{ratios:?}");
}

#[test]
fn full_pipeline_produces_consistent_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run_dir = dir.path().join("run");
    for sub in ["train-target", "calibrate", "train-draft", "decode", "bench", "ablate"] {
        let out = run(&cfg, sub, &[]);
        assert_eq!(out.status.code(), Some(0), "{sub}: {}", stderr(&out));
    }
    for f in ["target.drmt", "target_log.jsonl", "responses.tsv", "calibration.tsv", "draft.drmt", "draft_log.jsonl"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }

    // three loss components on every draft log line
    let log = fs::read_to_string(run_dir.join("draft_log.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["loss_feat", "loss_intermed", "loss_kl"] {
            assert!(v[k].is_number(), "{k} missing in {line}");
        }
    }

    let transcript = fs::read_to_string(run_dir.join("reports/decode/transcript.jsonl")).unwrap();
    assert!(transcript.lines().count() > 0);

    for report in ["bench", "ablate"] {
        let dir = run_dir.join("reports").join(report);
        let json = read_json_rows(&dir.join("report.json")).unwrap();
        let csv = read_csv_rows(&dir.join("report.csv")).unwrap();
        assert_eq!(json, csv, "{report}: csv and json disagree");
        for r in &json {
            assert!(r.tau >= 1.0, "{}: tau {}", r.config_id, r.tau);
            assert!((r.ar_time_per_token_s / r.time_per_token_s - r.speedup).abs() < 1e-9);
        }
    }
    let bench = read_json_rows(&run_dir.join("reports/bench/report.json")).unwrap();
    // chain and tree, two temperatures, two seeds plus a mean row each
    assert_eq!(bench.len(), 2 * 2 * 3);
    assert!(bench.iter().filter(|r| r.temperature == 0.0).all(|r| r.greedy_match == Some(1.0)));
    let ablate = read_json_rows(&run_dir.join("reports/ablate/report.json")).unwrap();
    let names: Vec<&str> = ablate.iter().map(|r| r.config_id.as_str()).collect();
    assert_eq!(names, ["full", "wo-ca", "keep-0.25"]);
    assert_eq!((ablate[0].tau_norm, ablate[0].speedup_norm), (Some(1.0), Some(1.0)));

    // a second run with the same config reproduces the checkpoints byte for byte
    let target = fs::read(run_dir.join("target.drmt")).unwrap();
    let draft = fs::read(run_dir.join("draft.drmt")).unwrap();
    for sub in ["train-target", "calibrate", "train-draft"] {
        assert_eq!(run(&cfg, sub, &[]).status.code(), Some(0));
    }
    assert_eq!(fs::read(run_dir.join("target.drmt")).unwrap(), target);
    assert_eq!(fs::read(run_dir.join("draft.drmt")).unwrap(), draft);
}
