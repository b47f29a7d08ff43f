use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grpo-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn train(dir: &Path, preset: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--preset",
        preset,
        "--set",
        "steps=5",
        "--set",
        "n_train=32",
        "--set",
        "n_eval=16",
        "--out",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    lab(&args)
}

#[test]
fn gen_data_writes_both_splits() {
    let tmp = TempDir::new().unwrap();
    let out = lab(&[
        "gen-data",
        "--set",
        "n_train=20",
        "--set",
        "n_eval=8",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let train = fs::read_to_string(tmp.path().join("train.jsonl")).unwrap();
    let eval = fs::read_to_string(tmp.path().join("eval.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 20);
    assert_eq!(eval.lines().count(), 8);
}

#[test]
fn train_eval_compare_and_plots() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = train(&a, "grpo_base", &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("greedy accuracy"));
    let out = train(&b, "ecr", &["--seed", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(fs::read_to_string(b.join("config.toml")).unwrap().contains("seed = 2"));

    let out = lab(&[
        "eval",
        "--checkpoint",
        a.join("checkpoints/final.ckpt").to_str().unwrap(),
        "--preset",
        "grpo_base",
        "--set",
        "n_train=32",
        "--set",
        "n_eval=16",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["greedy"], saved);

    let out = lab(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("think_len_mean"));

    let out = lab(&[
        "compare",
        "--family",
        "--json",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let fam: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(fam["pairs"], 1);

    let plots = tmp.path().join("plots");
    let out = lab(&[
        "plots",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let reward = fs::read_to_string(plots.join("reward.csv")).unwrap();
    assert_eq!(reward.lines().count(), 6);
}

#[test]
fn config_file_is_read_and_dry_run_prints_it() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("run.toml");
    fs::write(&path, "preset = \"drgrpo\"\nsteps = 17\n").unwrap();
    let out = lab(&["train", "--config", path.to_str().unwrap(), "--dry-run"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("steps = 17"));
    assert!(text.contains("advantage_mode = \"dr_grpo\""));
}

#[test]
fn gradcheck_and_oracle_pass() {
    let out = lab(&["gradcheck", "--trials", "20"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("PASS"));
    let out = lab(&["gradcheck", "--trials", "0"]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("warning"));
    let out = lab(&["oracle", "--fixtures", "2", "--samples", "20000"]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["train".into(), "--set".into(), "stepz=3".into(), "--dry-run".into()],
        vec!["train".into(), "--set".into(), "lr=-1".into(), "--dry-run".into()],
        vec![
            "train".into(),
            "--config".into(),
            tmp.path().join("missing.toml").display().to_string(),
        ],
        vec![
            "train".into(),
            "--set".into(),
            "steps=1".into(),
            "--out".into(),
            blocker.join("run").display().to_string(),
        ],
        vec![
            "compare".into(),
            tmp.path().display().to_string(),
            tmp.path().display().to_string(),
        ],
        vec!["compare".into(), tmp.path().display().to_string()],
        vec!["plots".into(), tmp.path().join("absent").display().to_string()],
        vec!["eval".into(), "--checkpoint".into(), blocker.display().to_string()],
    ];
    for args in cases {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = lab(&refs);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(stderr(&out).contains("error"), "{args:?}: {}", stderr(&out));
    }
    let out = lab(&["no-such-command"]);
    assert!(!out.status.success());
}
