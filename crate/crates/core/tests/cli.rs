use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hdc::config::RunConfig;
use hdc::report::{Summary, read_metrics};
use hdc::verify::tiny_run_config;

fn hdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdc"))
        .args(args)
        .env("HDC_THREADS", "1")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let p = dir.join("toy.json");
    cfg.save(&p).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn bad_invocations_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&hdc(&["pretrain", "--bogus"])), 1);
    assert_eq!(code(&hdc(&["no-such-command"])), 1);
    assert_eq!(code(&hdc(&["gen-data", "--config", "/nonexistent.json", "--out", out])), 1);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"trainer": {"steps": 5, "warmup": 2}}"#).unwrap();
    assert_eq!(code(&hdc(&["gen-data", "--config", bad.to_str().unwrap(), "--out", out])), 1);
    assert_eq!(code(&hdc(&["pretrain", "--batch", "1", "--out", out])), 1);
    assert_eq!(code(&hdc(&["pretrain", "--weights", "a3=oops", "--out", out])), 1);
    assert_eq!(code(&hdc(&["pretrain", "--weights", "a9=1", "--out", out])), 1);
    assert_eq!(code(&hdc(&["--help"])), 0);
}

#[test]
fn runtime_failures_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("garbage.hdck");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let cfg = write_config(dir.path(), &tiny_run_config(0));
    let out = hdc(&[
        "eval-retrieval",
        "--config",
        &cfg,
        "--checkpoint",
        garbage.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_run_config(0));
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = hdc(&["gen-data", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        files.push(fs::read(out.join("dataset.bin")).unwrap());
        let resolved = RunConfig::load(&out.join("resolved_config.json")).unwrap();
        assert_eq!(resolved.seed, 7);
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn pretrain_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_run_config(3));
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["pretrain", "--config", &cfg, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = hdc(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&full, &["--weights", "a3=0.5,b5=2", "--tau", "0.1"]);
    let resolved = RunConfig::load(&full.join("resolved_config.json")).unwrap();
    assert_eq!(resolved.loss.alphas[&3], 0.5);
    assert_eq!(resolved.loss.betas[&5], 2.0);
    assert_eq!(resolved.loss.tau, 0.1);
    assert_eq!(read_metrics(&full.join("metrics.csv")).unwrap().len(), 4);

    // Run further than the resume point, then resume from step 2 of the
    // same run: rows past step 2 are replaced, not duplicated.
    run(&part, &["--weights", "a3=0.5,b5=2", "--tau", "0.1"]);
    let ckpt = part.join("checkpoints/step_000002.hdck");
    run(&part, &["--weights", "a3=0.5,b5=2", "--tau", "0.1", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(
        fs::read(part.join("metrics.csv")).unwrap(),
        fs::read(full.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(part.join("checkpoints/step_000004.hdck")).unwrap(),
        fs::read(full.join("checkpoints/step_000004.hdck")).unwrap()
    );

    let last = full.join("checkpoints/step_000004.hdck");
    let o = hdc(&[
        "eval-retrieval",
        "--config",
        &cfg,
        "--checkpoint",
        last.to_str().unwrap(),
        "--out",
        full.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(full.join("summary.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["total_loss_final", "top1", "top5", "schema_version"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let summary: Summary = serde_json::from_str(&text).unwrap();
    assert_eq!(summary.steps, 4);
    let retrieval = fs::read_to_string(full.join("retrieval.csv")).unwrap();
    assert!(retrieval.starts_with("label_mode,k,accuracy"));

    let o = hdc(&[
        "probe",
        "--config",
        &cfg,
        "--checkpoint",
        last.to_str().unwrap(),
        "--out",
        full.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(full.join("probe.json").exists());
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_run_config(4));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = hdc(&["pretrain", "--config", &cfg, "--steps", "3", "--seed", "9", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let resolved = a.join("resolved_config.json");
    let o = hdc(&["pretrain", "--config", resolved.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = tiny_run_config(0);
    base.trainer.steps = 2;
    base.dataset.num_videos = 12;
    let cfg = write_config(dir.path(), &base);
    let out = dir.path().join("abl");
    let o = hdc(&["ablate", "--config", &cfg, "--seed", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + base.evaluator.grid.len());
}

#[test]
fn selfcheck_passes() {
    let o = hdc(&["selfcheck"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{text}");
    assert!(!text.contains("FAIL"));
}
