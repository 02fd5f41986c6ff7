//! Exit codes, error lines and determinism of the `kpdistill` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5
[world]
n_items = 30
n_keyphrases = 60
[search_logs]
n_impressions = 2000
[labels]
n_train_pairs = 400
n_val_pairs = 150
n_test_pairs = 150
[trainer]
epochs = 1
[cross_trainer]
epochs = 1
[evaluation]
item_sample_size = 10
judge_sample_size = 100
[ablation]
label_sets = [["CTR"], ["LLM", "CTR", "KD"]]
"#;

fn kpdistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpdistill"))
        .args(args)
        .output()
        .unwrap()
}

fn setup(dir: &Path) -> String {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, SMALL).unwrap();
    cfg.display().to_string()
}

fn run_ok(stage: &str, cfg: &str, out: &Path) -> serde_json::Value {
    let o = kpdistill(&[stage, "--config", cfg, "--out", out.to_str().unwrap()]);
    assert!(
        o.status.success(),
        "{stage}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    serde_json::from_str(&stdout).unwrap()
}

fn error_line(o: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    serde_json::from_str(&stderr).unwrap()
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("unknown.toml", "bogus_key = 1\n"),
        ("seeded.toml", "[world]\nseed = 3\n"),
        ("range.toml", "[labels]\njudge_noise = 0.7\n"),
    ] {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        let o = kpdistill(&[
            "gen",
            "--config",
            p.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(2), "{name}");
        assert_eq!(error_line(&o)["error"], "config", "{name}");
    }
}

#[test]
fn eval_before_train_bi_exits_3_naming_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("out");
    run_ok("gen", &cfg, &out);
    run_ok("train-cross", &cfg, &out);
    let o = kpdistill(&["eval", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_line(&o);
    assert_eq!(e["error"], "missing_artifact");
    assert!(
        e["path"].as_str().unwrap().ends_with("student/params.kpdp"),
        "{e}"
    );
}

#[test]
fn gen_twice_gives_identical_world_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run_ok("gen", &cfg, &a)["status"], "ran");
    assert_eq!(run_ok("gen", &cfg, &a)["status"], "up-to-date");
    run_ok("gen", &cfg, &b);
    assert_eq!(
        fs::read(a.join("world.json")).unwrap(),
        fs::read(b.join("world.json")).unwrap()
    );
}

#[test]
fn seed_flag_changes_the_world() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok("gen", &cfg, &a);
    let o = kpdistill(&[
        "gen",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "6",
    ]);
    assert!(o.status.success());
    assert_ne!(
        fs::read(a.join("world.json")).unwrap(),
        fs::read(b.join("world.json")).unwrap()
    );
}

#[test]
fn ablate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        for stage in ["gen", "train-cross", "kd-score", "ablate"] {
            run_ok(stage, &cfg, &out);
        }
        reports.push(fs::read(out.join("reports/ablation.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let table: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
}
