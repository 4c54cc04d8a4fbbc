use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sceneqa::datakit::TaskTag;
use sceneqa::eval::{write_predictions, Prediction};
use sceneqa::pointcloud::io::parse_ply;

fn sceneqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sceneqa"))
        .args(args)
        .env_remove("SCENEQA_DATASET")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sceneqa(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

fn small_dataset(dir: &Path) {
    ok(&["gen-data", "--out", s(dir), "--seed", "3", "--scenes", "6"]);
}

/// Trains a tiny model for one epoch and returns its checkpoint path.
fn tiny_checkpoint(data: &Path, out: &Path) -> PathBuf {
    ok(&[
        "train", "--phase", "finetune", "--dataset", s(data), "--preset", "tiny", "--epochs", "1", "--out", s(out),
    ]);
    out.join("last.ckpt")
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    small_dataset(a.path());
    small_dataset(b.path());
    let fa = files(a.path());
    assert!(fa.iter().any(|(p, _)| p.ends_with("vocab.txt")));
    assert_eq!(fa, files(b.path()));
}

#[test]
fn invalid_palette_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = serde_json::to_value(sceneqa::datakit::SceneConfig::default()).unwrap();
    cfg["colors"][1]["rgb"] = serde_json::json!([2.0, 0.0, 0.0]);
    let path = dir.path().join("scene.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = sceneqa(&["gen-data", "--out", s(&dir.path().join("d")), "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("colors[1].rgb"), "{}", stderr(&out));
}

#[test]
fn identical_predictions_score_full_marks() {
    let dir = tempfile::tempdir().unwrap();
    let preds: Vec<Prediction> = ["the red chair", "two", "a room with one lamp."]
        .iter()
        .enumerate()
        .map(|(i, a)| Prediction {
            id: i.to_string(),
            task: TaskTag::Qa,
            question: "q".into(),
            answer: a.to_string(),
            references: vec![a.to_string()],
        })
        .collect();
    let path = dir.path().join("p.jsonl");
    write_predictions(&path, &preds).unwrap();
    let stdout = ok(&["eval", "--predictions", s(&path), "--split", "mine"]);
    let row: Vec<&str> = stdout.lines().find(|l| l.starts_with("mine")).unwrap().split_whitespace().collect();
    assert_eq!(row[1], "100.00", "BLEU-1 in {stdout}");
    assert_eq!(row[8], "100.00", "EM@1 in {stdout}");
}

#[test]
fn exit_codes_follow_the_error_kind() {
    assert_eq!(sceneqa(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(sceneqa(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    let out = sceneqa(&["token-stats", "--dataset", s(&missing)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = sceneqa(&["gen-data", "--out", s(&missing), "--scenes", "0"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn query_count_above_decoder_queries_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("m.json");
    let out = sceneqa(&["init-config", "--preset", "tiny", "--nq", "9", "--vocab-size", "16", "--out", s(&out_path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("exceed"), "{}", stderr(&out));
    assert!(!out_path.exists());
    ok(&["init-config", "--preset", "tiny", "--nq", "8", "--vocab-size", "16", "--out", s(&out_path)]);
}

#[test]
fn checkpoint_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let ck = tiny_checkpoint(&data, &dir.path().join("run"));

    // A configuration with an extra language model layer cannot take the
    // checkpoint; the error lists the tensors it lacks.
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/model.json")).unwrap()).unwrap();
    cfg["lm"]["layers"] = serde_json::json!(2);
    let cfg_path = dir.path().join("bigger.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = sceneqa(&[
        "train", "--phase", "finetune", "--dataset", s(&data), "--model-config", s(&cfg_path), "--checkpoint", s(&ck),
        "--out", s(&dir.path().join("again")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("expected but missing: [lm.") && err.contains("found but unexpected: []"), "{err}");

    let cloud = data.join("clouds/scene00000.ply");
    let export = dir.path().join("heat");
    ok(&[
        "export-attention", "--checkpoint", s(&ck), "--cloud", s(&cloud), "--question", "what color is the chair?", "--k", "2",
        "--out", s(&export),
    ]);
    let original = parse_ply(&std::fs::read(&cloud).unwrap(), "in").unwrap();
    for name in ["query_00.ply", "query_01.ply", "composite.ply"] {
        let heat = parse_ply(&std::fs::read(export.join(name)).unwrap(), name).unwrap();
        assert_eq!(heat.len(), original.len(), "{name}");
        assert_eq!(heat.points(), original.points(), "{name}");
        let reds: Vec<f64> = heat.colors().unwrap().iter().map(|c| c[0]).collect();
        assert!(reds.iter().all(|r| (0.0..=1.0).contains(r)), "{name}");
    }
    assert_eq!(std::fs::read_to_string(export.join("queries.jsonl")).unwrap().lines().count(), 2);

    let out = sceneqa(&[
        "export-attention", "--checkpoint", s(&ck), "--cloud", s(&cloud), "--question", "x", "--k", "99", "--out",
        s(&export),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let answer = ok(&["infer", "--checkpoint", s(&ck), "--cloud", s(&cloud), "--question", "how many chairs are there?"]);
    assert_eq!(answer.lines().count(), 1);
}
