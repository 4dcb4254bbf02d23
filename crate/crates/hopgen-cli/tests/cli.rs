//! End-to-end tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hopgen"))
}

fn run_ok(cmd: &mut Command) -> serde_json::Value {
    let out = cmd.output().expect("spawn hopgen");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is a JSON summary")
}

fn run_err(cmd: &mut Command) -> serde_json::Value {
    let out: Output = cmd.output().expect("spawn hopgen");
    assert!(!out.status.success(), "command unexpectedly succeeded");
    serde_json::from_slice(&out.stderr).expect("stderr is a JSON error object")
}

fn write_config(dir: &Path, data: &Path, lexicon: &Path, out_dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "train_data": data,
        "lexicon": lexicon,
        "out_dir": out_dir,
        "vocab_size": 200,
        "embed_dim": 8,
        "tag_dim": 4,
        "hidden_dim": 8,
        "max_entities": 12,
        "max_context_len": 120,
        "batch_size": 4,
        "max_epochs": 2,
        "bfs_start_epoch": 1,
        "seed": 11,
        "beam": 3,
        "max_decode_len": 12
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn pipeline_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.jsonl");
    let lexicon = dir.path().join("train.lexicon.txt");

    let summary = run_ok(bin().args([
        "gen-data",
        "--seed",
        "7",
        "--count",
        "8",
        "--out",
        data.to_str().unwrap(),
    ]));
    assert_eq!(summary["examples"], 8);
    assert!(lexicon.is_file(), "default lexicon sidecar written");

    let run_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &data, &lexicon, &run_dir);
    let summary = run_ok(bin().args(["train", "--config", cfg.to_str().unwrap()]));
    assert_eq!(summary["epochs"], 2);
    let best = summary["best_checkpoint"].as_str().unwrap().to_string();
    assert!(Path::new(&best).is_file());
    assert!(run_dir.join("vocab.txt").is_file());
    assert!(run_dir.join("lexicon.txt").is_file());
    assert!(run_dir.join("metrics.jsonl").is_file());

    let preds = dir.path().join("preds.jsonl");
    let summary = run_ok(bin().args([
        "generate",
        "--checkpoint",
        &best,
        "--data",
        data.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]));
    assert_eq!(summary["examples"], 8);
    assert_eq!(summary["beam"], 3, "beam defaults to the config value");
    let first: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(&preds)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert!(first["id"].as_str().unwrap().starts_with("synth-7-"));
    assert!(first["prediction"].is_string());
    assert!(first["logprob"].as_f64().unwrap() <= 0.0);

    let metrics = run_ok(bin().args([
        "evaluate",
        "--pred",
        preds.to_str().unwrap(),
        "--ref",
        data.to_str().unwrap(),
    ]));
    assert_eq!(metrics["examples"], 8);
    for key in ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"] {
        let v = metrics[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} out of range: {v}");
    }
}

#[test]
fn build_graph_formats() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    run_ok(bin().args([
        "gen-data",
        "--seed",
        "3",
        "--count",
        "4",
        "--distractors",
        "1",
        "--out",
        data.to_str().unwrap(),
    ]));
    let lexicon = dir.path().join("d.lexicon.txt");

    let graphs = dir.path().join("g.jsonl");
    run_ok(bin().args([
        "build-graph",
        "--data",
        data.to_str().unwrap(),
        "--lexicon",
        lexicon.to_str().unwrap(),
        "--out",
        graphs.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&graphs).unwrap();
    assert_eq!(text.lines().count(), 4);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let g = v["entities"].as_u64().unwrap();
        assert!(g >= 3, "bridge examples carry at least three entities");
        assert!(!v["answer_entities"].as_array().unwrap().is_empty());
        for edge in v["edges"].as_array().unwrap() {
            let i = edge[0].as_u64().unwrap();
            let j = edge[1].as_u64().unwrap();
            assert!(i < j && j < g);
        }
    }

    let dot = dir.path().join("g.dot");
    run_ok(bin().args([
        "build-graph",
        "--data",
        data.to_str().unwrap(),
        "--lexicon",
        lexicon.to_str().unwrap(),
        "--format",
        "dot",
        "--out",
        dot.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&dot).unwrap();
    assert_eq!(text.matches("graph ex_").count(), 4);
    assert!(text.contains(" -- "), "edges rendered");
    assert!(text.contains("peripheries=2"), "answer entities marked");
}

#[test]
fn generate_rejects_mismatched_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.jsonl");
    run_ok(bin().args([
        "gen-data",
        "--seed",
        "5",
        "--count",
        "6",
        "--out",
        data.to_str().unwrap(),
    ]));
    let lexicon = dir.path().join("train.lexicon.txt");
    let run_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &data, &lexicon, &run_dir);
    run_ok(bin().args(["train", "--config", cfg.to_str().unwrap()]));

    // Corrupt the sidecar vocab by dropping its last line.
    let vocab_path = run_dir.join("vocab.txt");
    let vocab = std::fs::read_to_string(&vocab_path).unwrap();
    let shorter: Vec<&str> = vocab.lines().collect();
    std::fs::write(&vocab_path, shorter[..shorter.len() - 1].join("\n")).unwrap();

    let best = run_dir.join("checkpoints").join("best.json");
    let err = run_err(bin().args([
        "generate",
        "--checkpoint",
        best.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("p.jsonl").to_str().unwrap(),
    ]));
    let msg = err["error"].as_str().unwrap();
    assert!(msg.contains("embedding"), "unexpected message: {msg}");
}

#[test]
fn missing_files_fail_with_json_error() {
    let err = run_err(bin().args(["train", "--config", "/definitely/missing.json"]));
    let msg = err["error"].as_str().unwrap();
    assert!(
        msg.contains("missing.json"),
        "message names the path: {msg}"
    );

    let err = run_err(bin().args([
        "evaluate",
        "--pred",
        "/missing/preds.jsonl",
        "--ref",
        "/missing/refs.jsonl",
    ]));
    assert!(err["error"].as_str().unwrap().contains("preds.jsonl"));
}

#[test]
fn bad_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"train_data": "x.jsonl", "out_dir": "o", "leaning_rate": 0.1}"#,
    )
    .unwrap();
    let err = run_err(bin().args(["train", "--config", cfg.to_str().unwrap()]));
    assert!(err["error"].as_str().unwrap().contains("leaning_rate"));
}

#[test]
fn grad_check_decoder_passes() {
    let v = run_ok(bin().args(["grad-check", "--module", "decoder"]));
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_err"].as_f64().unwrap() <= 1e-4);
    assert!(v["params_checked"].as_u64().unwrap() >= 10);

    let err = run_err(bin().args(["grad-check", "--module", "sideways"]));
    assert!(err["error"].as_str().unwrap().contains("sideways"));
}
