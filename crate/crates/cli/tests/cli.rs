use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[model]
input_size = 16

[model.attention]
channels = [2, 2, 2, 1]

[model.backbone]
channels = [3, 4, 4, 6]

[model.convlstm]
hidden = [3, 3]

[model.heads]
trunk_width = 6

[data]
sequences = 30
balanced = true

[data.splits]
train = 0.6
val = 0.2
test = 0.2

[data.scene]
canvas = 16
length = 8

[train]
max_epochs = 1
window = 4
batch = 2
"#;

fn blinknet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blinknet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut all: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|path| (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap()))
        .collect();
    all.sort();
    all
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gen_twice_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = blinknet(&["gen", "--config", p(&cfg), "--seed", "7", "--out", p(dir)]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let fa = files(&a);
    assert!(fa.iter().any(|(n, _)| n == "train.blkd"));
    assert!(fa.iter().any(|(n, _)| n == "config.toml"));
    assert_eq!(fa, files(&b));
}

#[test]
fn default_config_gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = blinknet(&[
            "gen", "--config", "default", "--seed", "7", "--set", "data.sequences=12", "--out", p(dir),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(files(&a), files(&b));
}

#[test]
fn unknown_config_key_exits_2_and_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = blinknet(&["gen", "--set", "train.learning_rate=0.1", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.learning_rate"), "{}", stderr(&out));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let out = blinknet(&["gen", "--config", p(&cfg), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.width"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(blinknet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(blinknet(&["gen", "--preset", "huge"]).status.code(), Some(2));
    let out = blinknet(&["gen", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/run.toml"));
}

#[test]
fn runtime_failures_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = blinknet(&["train", "--data", p(&tmp.path().join("missing")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("missing"));
}

#[test]
fn train_eval_infer_and_ablate_on_a_tiny_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let run = |args: &[&str]| {
        let mut full = args.to_vec();
        full.extend(["--config", p(&cfg)]);
        let out = blinknet(&full);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
        out
    };
    run(&["gen", "--out", p(&data)]);

    let train_a = tmp.path().join("train_a");
    let train_b = tmp.path().join("train_b");
    for dir in [&train_a, &train_b] {
        run(&["train", "--data", p(&data), "--out", p(dir)]);
    }
    for name in ["epochs.jsonl", "timing.jsonl", "model.ckpt", "val_metrics.json", "val_metrics.txt", "config.toml"] {
        assert!(train_a.join(name).exists(), "{name}");
    }
    let log = std::fs::read_to_string(train_a.join("epochs.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert_eq!(log, std::fs::read_to_string(train_b.join("epochs.jsonl")).unwrap());

    let ckpt = train_a.join("model.ckpt");
    let eval = tmp.path().join("eval");
    run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&eval)]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["accuracy"].as_f64().is_some());
    assert!(eval.join("metrics.txt").exists());

    let infer = tmp.path().join("infer");
    run(&["infer", "--checkpoint", p(&ckpt), "--data", p(&data), "--count", "2", "--out", p(&infer)]);
    let preds = std::fs::read_to_string(infer.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 2 * 8);
    let first: serde_json::Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    for key in ["intent", "left", "right", "view", "truth"] {
        assert!(!first[key].is_null(), "{key}");
    }
    let mask = image::open(infer.join("masks").join("seq0000_frame000.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (32, 16));

    let ablation = tmp.path().join("ablation");
    run(&["ablate", "--data", p(&data), "--seeds", "0", "--out", p(&ablation)]);
    let table = std::fs::read_to_string(ablation.join("ablation.txt")).unwrap();
    for variant in ["no_attention", "intent_only", "intent_view", "full"] {
        assert!(table.lines().any(|l| l.contains(variant)), "{variant} missing from\n{table}");
    }
    let header = table.lines().find(|l| l.starts_with("variant")).unwrap();
    for column in ["accuracy", "recall", "F1"] {
        assert!(header.contains(column), "{header}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ablation.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn gradcheck_passes_on_a_fresh_checkout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = blinknet(&["gradcheck", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = std::fs::read_to_string(tmp.path().join("gradcheck.txt")).unwrap();
    assert!(report.contains("end-to-end"));
    assert!(report.contains(" 0 failed"));
    assert!(!report.lines().any(|l| l.starts_with("FAIL")));
}
