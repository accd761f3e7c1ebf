use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pet"))
        .args(args)
        .output()
        .expect("spawn pet")
}

fn ok(args: &[&str]) -> String {
    let out = pet(args);
    assert!(
        out.status.success(),
        "pet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A toy sentiment directory with a shrunken model and step counts.
fn small_toy(dir: &Path) -> PathBuf {
    ok(&["toy", "--kind", "sentiment", "--out", s(dir)]);
    let cfg = dir.join("config.toml");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("model_dim = 32", "model_dim = 8")
        .replace("heads = 4", "heads = 2")
        .replace("ff_dim = 64", "ff_dim = 16")
        .replace("steps = 16000", "steps = 20")
        .replace("max_steps = 300", "max_steps = 3")
        .replace("max_steps = 30", "max_steps = 2");
    std::fs::write(&cfg, text).unwrap();
    ok(&[
        "pretrain",
        "-c",
        s(&cfg),
        "--out",
        s(&dir.join("runs/pretrain")),
    ]);
    ok(&[
        "sample",
        "-c",
        s(&cfg),
        "--out",
        s(&dir.join("runs/sample")),
    ]);
    cfg
}

fn lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

fn assert_single_line_error(out: &Output) {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn toy_writes_a_complete_task_directory() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["toy", "--kind", "span-choice", "--out", s(tmp.path())]);
    for f in [
        "task/task.json",
        "task/verbalizers.json",
        "vocab.txt",
        "train.jsonl",
        "test.jsonl",
        "unlabeled.jsonl",
        "corpus.txt",
        "config.toml",
    ] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    assert_eq!(lines(&tmp.path().join("unlabeled.jsonl")), 1000);
}

#[test]
fn train_eval_score_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_toy(dir);
    assert_eq!(lines(&dir.join("runs/sample/labeled.jsonl")), 32);

    let run = dir.join("runs/train");
    ok(&["train", "-c", s(&cfg)]);
    let ckpts = std::fs::read_dir(run.join("gen0"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "ckpt")
        .count();
    assert_eq!(ckpts, 9);
    let weights: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("weights.json")).unwrap()).unwrap();
    assert_eq!(weights.as_object().unwrap().len(), 3);
    assert!(run.join("classifier.ckpt").exists());
    assert_eq!(lines(&run.join("soft_labels.jsonl")), 1000);
    assert_eq!(lines(&run.join("predictions.jsonl")), 500);
    let csv = std::fs::read_to_string(run.join("gen0/p0-1.csv")).unwrap();
    assert!(csv.starts_with("step,loss,grad_norm\n"));
    assert_eq!(csv.lines().count(), 3);

    // replaying the manifest reproduces every artifact
    let again = dir.join("replay");
    ok(&["replay", s(&run.join("manifest.json")), "--out", s(&again)]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let artifacts = manifest["artifacts"].as_object().unwrap();
    assert!(artifacts.len() > 20);
    for (name, rel) in artifacts {
        if name == "config" {
            continue;
        }
        let rel = rel.as_str().unwrap();
        assert_eq!(
            std::fs::read(run.join(rel)).unwrap(),
            std::fs::read(again.join(rel)).unwrap(),
            "{rel}"
        );
    }

    // gold labels written as predictions score perfectly
    let perfect = dir.join("perfect.jsonl");
    let text: String = std::fs::read_to_string(dir.join("test.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            format!(
                "{}\n",
                serde_json::json!({ "id": v["id"], "label": v["label"] })
            )
        })
        .collect();
    std::fs::write(&perfect, text).unwrap();
    let eval_dir = dir.join("runs/eval");
    ok(&[
        "eval",
        "-c",
        s(&cfg),
        "--predictions",
        s(&perfect),
        "--out",
        s(&eval_dir),
    ]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap())
            .unwrap();
    for (_, v) in metrics["values"].as_object().unwrap() {
        assert_eq!(v.as_f64().unwrap(), 1.0);
    }

    let score_dir = dir.join("runs/score");
    ok(&[
        "score",
        "-c",
        s(&cfg),
        "--pvp",
        "p1",
        "--checkpoint",
        s(&run.join("gen0/p1-2.ckpt")),
        "--strategy",
        "ltr",
        "--out",
        s(&score_dir),
    ]);
    let first = std::fs::read_to_string(score_dir.join("scores.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(row["strategy"], "ltr");
    assert_eq!(row["labels"].as_object().unwrap().len(), 2);
    assert_eq!(lines(&score_dir.join("scores.jsonl")), 500);
}

#[test]
fn ipet_compare_decoding_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_toy(dir);

    let run = dir.join("runs/ipet");
    ok(&[
        "ipet",
        "-c",
        s(&cfg),
        "--generations",
        "2",
        "--growth-factor",
        "3",
        "--no-distill",
        "--weights",
        "uniform",
        "--parallelism",
        "2",
        "--out",
        s(&run),
    ]);
    let gens: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("generations.json")).unwrap())
            .unwrap();
    // an untrained toy model may lack confident examples of one label
    for (i, size) in gens[1]["train_sizes"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
    {
        let short: u64 = gens[1]["shortfalls"][i]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .sum();
        assert_eq!(size.as_u64().unwrap() + short, 96);
    }
    let size = gens[1]["train_sizes"][8].as_u64().unwrap() as usize;
    assert_eq!(lines(&run.join("gen1/p2-3.pseudo.jsonl")), size - 32);
    assert!(!run.join("classifier.ckpt").exists());
    let manifest = std::fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"growth_factor\": 3.0"));
    let weights = std::fs::read_to_string(run.join("weights.json")).unwrap();
    assert_eq!(weights.matches("1.0").count(), 3);

    let cmp = dir.join("runs/cmp");
    ok(&["compare-decoding", "-c", s(&cfg), "--out", s(&cmp)]);
    let table = std::fs::read_to_string(cmp.join("decoding.tsv")).unwrap();
    let rows: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(rows, ["max-first", "ltr", "parallel", "untrained"]);
}

#[test]
fn failures_are_single_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");

    std::fs::write(&cfg, "[train]\nlearning_rat = 1.0\n").unwrap();
    let out = pet(&["train", "-c", s(&cfg)]);
    assert_single_line_error(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    std::fs::write(&cfg, "").unwrap();
    let out = pet(&["train", "-c", s(&cfg)]);
    assert_single_line_error(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("task.bundle"));

    let out = pet(&["train", "--strategy", "beam"]);
    assert_single_line_error(&out);
    assert_eq!(out.status.code(), Some(2));

    let out = pet(&[
        "eval",
        "-c",
        s(&tmp.path().join("missing.toml")),
        "--predictions",
        "x",
    ]);
    assert_single_line_error(&out);
}
