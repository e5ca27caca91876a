use csibert_core::model::{Encoder, ModelConfig};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn csibert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csibert"))
        .args(args)
        .env_remove("CSI_BERT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_data(dir: &Path, seed: &str) {
    ok(&csibert(&["gen", "--preset", "desk", "--cells", "1", "--ues", "4", "--seed", seed, "--out", p(dir)]));
}

#[test]
fn gen_desk_counts_and_repeats_bytewise() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let stdout = ok(&csibert(&["gen", "--preset", "desk", "--seed", "7", "--out", p(&a)]));
    assert!(stdout.contains("wrote 120 matrices"), "{stdout}");
    ok(&csibert(&["--threads", "1", "gen", "--preset", "desk", "--seed", "7", "--out", p(&b)]));
    assert_eq!(fs::read(a.join("data.bin")).unwrap(), fs::read(b.join("data.bin")).unwrap());
    assert!(a.join("run.json").exists());
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    small_data(&data, "3");
    ok(&csibert(&[
        "train", "--data", p(&data), "--out", p(&run), "--lr", "0", "--optimizer", "sgd", "--epochs", "1", "--seed", "5",
    ]));
    let (model, extra) = Encoder::load(&run.join("model.ckpt")).unwrap();
    let fresh = Encoder::new(ModelConfig::desk(32, 16), 5).unwrap();
    assert_eq!(model.params, fresh.params);
    assert_eq!(extra["split_seed"], 5);
    assert!(run.join("run.json").exists());
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(csv.starts_with("step,epoch,loss\n"));
}

#[test]
fn missing_data_is_a_usage_error() {
    let out = csibert(&["train", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--data") && err.contains("Usage"), "{err}");
}

#[test]
fn unreadable_dataset_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = csibert(&["train", "--data", p(&tmp.path().join("none")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(csibert(&["gen", "--bogus"]).status.code(), Some(2));
}

#[test]
fn eval_single_experiment_and_bad_name() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let rep = tmp.path().join("rep");
    small_data(&data, "4");
    ok(&csibert(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "1", "--seed", "4"]));
    let ckpt = run.join("model.ckpt");

    let out = csibert(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--experiment", "nope", "--out", p(&rep)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("reconstruction|scenario"), "{err}");

    ok(&csibert(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--experiment", "reconstruction", "--out", p(&rep)]));
    let mut names: Vec<String> = fs::read_dir(&rep)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["reconstruction.csv", "reconstruction.json", "reconstruction.svg", "run.json"]);
}

#[test]
fn check_passes_and_catches_an_injected_fault() {
    let out = ok(&csibert(&["check", "--json"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["gradient_trials"].as_u64().unwrap() >= 100);

    let bad = csibert(&["check", "--inject-fault", "softmax_rows"]);
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("op softmax_rows"), "{err}");

    assert_eq!(csibert(&["check", "--inject-fault", "nosuchop"]).status.code(), Some(2));
}

#[test]
fn seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "[gen]\nseed = 11\ncells = 1\nues = 1\n").unwrap();
    let seed_of = |dir: &Path| -> u64 {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
        v["seed"].as_u64().unwrap()
    };

    let a = tmp.path().join("a");
    ok(&csibert(&["--config", p(&cfg), "gen", "--out", p(&a)]));
    assert_eq!(seed_of(&a), 11);

    let b = tmp.path().join("b");
    ok(&csibert(&["--config", p(&cfg), "gen", "--out", p(&b), "--seed", "12"]));
    assert_eq!(seed_of(&b), 12);

    let c = tmp.path().join("c");
    let out = Command::new(env!("CARGO_BIN_EXE_csibert"))
        .args(["gen", "--cells", "1", "--ues", "1", "--out", p(&c)])
        .env("CSI_BERT_SEED", "13")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(seed_of(&c), 13);

    let d = tmp.path().join("d");
    let out = Command::new(env!("CARGO_BIN_EXE_csibert"))
        .args(["--config", p(&cfg), "gen", "--out", p(&d)])
        .env("CSI_BERT_SEED", "13")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(seed_of(&d), 11);
}

#[test]
fn resume_continues_from_saved_state() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_data(&data, "6");
    let straight = tmp.path().join("straight");
    let half = tmp.path().join("half");
    let rest = tmp.path().join("rest");
    let common = ["--data", p(&data), "--seed", "2", "--batch", "3"];
    ok(&csibert(&[&["train", "--out", p(&straight), "--epochs", "2"][..], &common[..]].concat()));
    ok(&csibert(&[&["train", "--out", p(&half), "--epochs", "1"][..], &common[..]].concat()));
    ok(&csibert(&[&["train", "--out", p(&rest), "--epochs", "2", "--resume", p(&half)][..], &common[..]].concat()));
    let (a, _) = Encoder::load(&straight.join("model.ckpt")).unwrap();
    let (b, _) = Encoder::load(&rest.join("model.ckpt")).unwrap();
    assert_eq!(a.params, b.params);
}
