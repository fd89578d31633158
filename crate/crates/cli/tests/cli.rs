use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn lcsb(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lcsb"));
    cmd.args(args).env_remove("LCSB_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn text(dir: &Path) -> String {
    let path = dir.join("corpus.txt");
    let para = "The keeper climbed the stair and lit the lamp before the boats came home. ";
    std::fs::write(&path, para.repeat(200)).unwrap();
    path.to_string_lossy().into_owned()
}

fn config(dir: &Path, extra: Value) -> String {
    let mut cfg = json!({
        "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32, "seq_len": 16, "lora_rank": 2, "lora_alpha": 4.0},
        "total_steps": 8,
        "warmup_steps": 2,
        "eval_interval": 4,
        "eval_max_windows": 4,
        "corpus_path": text(dir),
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn train_writes_outputs_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({}));
    let out = dir.path().join("out");
    let o = lcsb(
        &["train", &cfg, "--set", "schedule.kind=cosine", "--set", "schedule.r_end=0.5", "--out", out.to_str().unwrap()],
        &[("LCSB_SEED", "77")],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["config"]["seed"], 77);
    assert_eq!(s["config"]["schedule"]["kind"], "cosine");
    assert_eq!(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 8);
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("checkpoint").join("manifest.json").exists());

    let o = lcsb(&["eval", out.join("checkpoint").to_str().unwrap(), &text(dir.path())], &[]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["loss"].as_f64().unwrap() > 0.0);
}

#[test]
fn stop_and_resume_matches_one_shot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({}));
    let (whole, part, rest) = (dir.path().join("whole"), dir.path().join("part"), dir.path().join("rest"));
    assert_eq!(lcsb(&["train", &cfg, "--out", whole.to_str().unwrap()], &[]).status.code(), Some(0));
    assert_eq!(lcsb(&["train", &cfg, "--stop-at", "3", "--out", part.to_str().unwrap()], &[]).status.code(), Some(0));
    let o = lcsb(
        &["train", &cfg, "--resume", part.join("checkpoint").to_str().unwrap(), "--out", rest.to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(summary(&whole)["final_eval_loss"], summary(&rest)["final_eval_loss"]);
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({"divergence_threshold": 0.5}));
    let o = lcsb(&["train", &cfg], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("diverged at step 1"));
}

#[test]
fn errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({"warmup_steps": 50}));
    let o = lcsb(&["train", &cfg], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warmup_steps"));
    let cfg = config(dir.path(), json!({}));
    assert_eq!(lcsb(&["train", &cfg, "--set", "nope.x=1"], &[]).status.code(), Some(1));
    assert_eq!(lcsb(&["train", &cfg], &[("LCSB_SEED", "abc")]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let o = lcsb(&["gradcheck", "--seeds", "3", "--model-seeds", "1"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("cross_entropy_logits") && out.contains("micro_model"));
}

#[test]
fn bench_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(config(dir.path(), json!({}))).unwrap()).unwrap();
    let suite = json!({
        "base": cfg,
        "variants": [
            {"name": "fo", "overrides": {"method": "full_backprop"}},
            {"name": "half", "overrides": {"schedule.r_start": 0.5}}
        ],
        "repeats": 1,
        "reference_variant": "fo"
    });
    let suite_path = dir.path().join("suite.json");
    std::fs::write(&suite_path, suite.to_string()).unwrap();
    let out = dir.path().join("bench");
    let o = lcsb(&["bench", suite_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--exclusive"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("1.00x") && stdout.contains("+0.00%"), "{stdout}");
    for f in ["table.json", "table.txt", "loss_curve.csv", "ratio_sweep.csv", "strategy_bar.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let runs = out.join("runs");
    let o = lcsb(
        &["report", runs.join("fo/seed42").to_str().unwrap(), runs.join("half/seed42").to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("seed42"));
    assert_eq!(
        lcsb(&["bench", suite_path.to_str().unwrap(), "--exclusive", "--parallel"], &[]).status.code(),
        Some(2)
    );
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    lcsb_core::harness::load_config(&dir.join("toy.json")).unwrap();
    for suite in ["ratio_sweep.json", "strategies.json", "quantized.json"] {
        let s = lcsb_core::bench::load_suite(&dir.join(suite)).unwrap();
        lcsb_core::bench::suite_configs(&s).unwrap();
    }
}
