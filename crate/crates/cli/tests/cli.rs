use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = r#"
seed = 0
[data]
scenes = 2
[encoder]
n_tokens = 32
out_tokens = 16
[mmt]
layers = 1
[pretrain]
max_steps = 20
batch = 4
[train]
lr_max = 1e-3
total_steps = 6
batch = 2
checkpoint_every = 3
encoder_warmup_steps = 4
[generation]
max_new_tokens = 8
"#;

fn ll3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ll3d")).args(args).output().expect("run ll3d")
}

fn ok(args: &[&str]) -> String {
    let out = ll3d(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

/// Config, generated data, a base checkpoint and one short training run,
/// shared by every test.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("tiny.toml"), TINY).unwrap();
        let cfg = root.join("tiny.toml");
        ok(&["datagen", "--config", s(&cfg), "--out", s(&root.join("data"))]);
        ok(&["pretrain-lm", "--config", s(&cfg), "--out", s(&root.join("base.ckpt"))]);
        ok(&["train", "--config", s(&cfg), "--init", s(&root.join("base.ckpt")), "--out", s(&root.join("run"))]);
        Fixture { _dir: dir, root }
    })
}

fn scene_file(f: &Fixture) -> PathBuf {
    let dir = f.root.join("data/scenes");
    let mut files: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files[0].clone()
}

#[test]
fn datagen_writes_scenes_samples_and_vocabulary() {
    let f = fixture();
    assert_eq!(std::fs::read_dir(f.root.join("data/scenes")).unwrap().count(), 2);
    let samples: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.root.join("data/samples.json")).unwrap()).unwrap();
    assert!(!samples.as_array().unwrap().is_empty());
    assert!(f.root.join("data/vocab.txt").exists());
}

#[test]
fn training_writes_periodic_checkpoints_and_keeps_base_frozen() {
    let f = fixture();
    let run = f.root.join("run");
    assert!(run.join("step-3.ckpt").exists() && run.join("step-6.ckpt").exists());
    let log = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    let inspect = ok(&["checkpoint", "inspect", s(&run.join("step-6.ckpt"))]);
    assert!(inspect.contains("step: 6"));
    assert!(inspect.contains("lm: ") && inspect.contains("frozen"));
    assert!(inspect.lines().any(|l| l.starts_with("mmt:") && l.ends_with("trainable")));
}

#[test]
fn identical_runs_produce_identical_checkpoints() {
    let f = fixture();
    let again = f.root.join("run_again");
    let cfg = f.root.join("tiny.toml");
    ok(&["train", "--config", s(&cfg), "--init", s(&f.root.join("base.ckpt")), "--out", s(&again)]);
    let a = std::fs::read(f.root.join("run/step-6.ckpt")).unwrap();
    let b = std::fs::read(again.join("step-6.ckpt")).unwrap();
    assert!(a == b, "checkpoints differ");
}

#[test]
fn eval_writes_reports_with_the_documented_shape() {
    let f = fixture();
    let ck = f.root.join("run/step-6.ckpt");
    let rep = f.root.join("reports");
    ok(&["eval", "--checkpoint", s(&ck), "--task", "densecap", "--strategy", "greedy", "--out", s(&rep)]);
    ok(&["eval", "--checkpoint", s(&ck), "--task", "qa", "--click", "related", "--strategy", "greedy", "--out", s(&rep)]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rep.join("densecap.json")).unwrap()).unwrap();
    assert_eq!(json["task"], "densecap");
    for m in json["metrics"].as_array().unwrap() {
        let keys: Vec<&str> = m.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["metric", "n_items", "threshold", "value"]);
        assert!(m["value"].is_f64());
    }
    let csv = std::fs::read_to_string(rep.join("qa_click.csv")).unwrap();
    assert!(csv.starts_with("metric,threshold,value,n_items\n"));
    assert!(csv.contains("exact_match"));
}

#[test]
fn generation_is_reproducible() {
    let f = fixture();
    let ck = f.root.join("run/step-6.ckpt");
    let scene = scene_file(f);
    let args = |strategy: &'static str| {
        vec![
            "generate".to_string(),
            "--checkpoint".into(),
            s(&ck).into(),
            "--scene".into(),
            s(&scene).into(),
            "--instruction".into(),
            "describe the room.".into(),
            "--strategy".into(),
            strategy.into(),
            "--seed".into(),
            "7".into(),
        ]
    };
    for strategy in ["greedy", "sample"] {
        let a: Vec<String> = args(strategy);
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        assert_eq!(ok(&refs), ok(&refs));
    }
}

#[test]
fn exit_codes() {
    let f = fixture();
    let ck = f.root.join("run/step-6.ckpt");
    let scene = scene_file(f);
    let malformed = ll3d(&["generate", "--checkpoint", s(&ck), "--scene", s(&scene), "--instruction", "x", "--click", "1,2"]);
    assert_eq!(malformed.status.code(), Some(1));
    let bad_box = ll3d(&["generate", "--checkpoint", s(&ck), "--scene", s(&scene), "--instruction", "x", "--box", "0,0,0,1,1,-1"]);
    assert_eq!(bad_box.status.code(), Some(1));
    assert_eq!(ll3d(&["frobnicate"]).status.code(), Some(1));
    let missing = ll3d(&["eval", "--checkpoint", s(&f.root.join("nope.ckpt")), "--task", "qa", "--out", s(&f.root)]);
    assert_eq!(missing.status.code(), Some(2));
    let wrong_task = ll3d(&["eval", "--checkpoint", s(&ck), "--task", "bogus", "--out", s(&f.root)]);
    assert_eq!(wrong_task.status.code(), Some(2));
    let garbage = f.root.join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(ll3d(&["checkpoint", "inspect", s(&garbage)]).status.code(), Some(2));
    let outside = ll3d(&["generate", "--checkpoint", s(&ck), "--scene", s(&scene), "--instruction", "x", "--click", "900,0,0"]);
    assert_eq!(outside.status.code(), Some(2));
    assert!(ll3d(&["--help"]).status.success());
}
