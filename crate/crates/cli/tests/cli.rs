use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use grapedet::model::ModelConfig;
use serde_json::json;

fn grapedet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grapedet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("GRAPEDET_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = grapedet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    grapedet(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small-model run configuration written next to the outputs.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut model = ModelConfig::gradcheck();
    model.swin.window_size = 2;
    let cfg = json!({
        "schema_version": "1",
        "seed": 5,
        "model": model,
        "train": {"epochs": 2, "batch_size": 4},
        "synth": {"n": 12, "profile": {"width": 64, "height": 64}},
        "augment": {"n": 1},
        "split": {"ratios": [0.5, 0.25, 0.25]},
    });
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn synth_and_split_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--config", s(&cfg), "--out-dir", s(d)]);
        ok(&["split", "--config", s(&cfg), "--data", s(d)]);
    }
    for f in ["manifest.jsonl", "counts.csv", "images/synth_00003.png", "splits/train.txt", "splits/val.txt", "splits/test.txt"] {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = tmp.path().join("c");
    ok(&["synth", "--config", s(&cfg), "--seed", "6", "--out-dir", s(&c)]);
    assert!(fs::read(a.join("manifest.jsonl")).unwrap() != fs::read(c.join("manifest.jsonl")).unwrap());
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train", "--epochs", "0"]), 1);
    assert_eq!(code(&["eval", "--weights", "w.ckpt", "--device", "cuda"]), 1);
    assert_eq!(code(&["split", "--data", s(&tmp.path().join("missing"))]), 1);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"schema_version": "1", "trian": {}}"#).unwrap();
    let out = grapedet(&["synth", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));

    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out-dir", s(&data)]);
    ok(&["split", "--config", s(&cfg), "--data", s(&data)]);
    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out_dir = tmp.path().join("eval");
    assert_eq!(code(&["eval", "--config", s(&cfg), "--data", s(&data), "--weights", s(&junk), "--out-dir", s(&out_dir)]), 2);
}

#[test]
fn ground_truth_as_detections_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out-dir", s(&data)]);
    let dets = tmp.path().join("dets");
    fs::create_dir_all(&dets).unwrap();
    for entry in fs::read_dir(data.join("labels")).unwrap() {
        let p = entry.unwrap().path();
        let text: String = fs::read_to_string(&p).unwrap().lines().map(|l| format!("{l} 0.9\n")).collect();
        fs::write(dets.join(p.file_name().unwrap()), text).unwrap();
    }
    let out = tmp.path().join("eval");
    ok(&["eval", "--config", s(&cfg), "--data", s(&data), "--detections", s(&dets), "--split", "all", "--out-dir", s(&out)]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["global"]["ap50"], json!(1.0));
    assert_eq!(report["global"]["f1"], json!(1.0));
    assert_eq!(report["global"]["n_images"], json!(12));
    assert!(out.join("strata.csv").is_file() && out.join("counts.csv").is_file());
}

#[test]
fn full_pipeline_emits_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["synth", "--config", s(&cfg), "--out-dir", s(&data)]);
    ok(&["augment", "--config", s(&cfg), "--data", s(&data)]);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(data.join("augment_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["planned_images"], json!(24));
    ok(&["split", "--config", s(&cfg), "--data", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out-dir", s(&run)]);
    for f in ["best.ckpt", "last.ckpt", "history.csv", "train_summary.json", "train_config.json", "train_meta.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let eval = tmp.path().join("eval");
    let w = run.join("best.ckpt");
    ok(&["eval", "--config", s(&cfg), "--data", s(&data), "--weights", s(&w), "--bench", "3", "--out-dir", s(&eval)]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(eval.join("report.json")).unwrap()).unwrap();
    assert!(report["latency"]["forward_ms"].as_f64().unwrap() > 0.0);
    assert_eq!(report["strata"].as_array().unwrap().len(), 14);

    let pred = tmp.path().join("pred");
    let images = data.join("images");
    ok(&["predict", "--config", s(&cfg), "--weights", s(&w), "--input", s(&images), "--annotate", "--conf-thresh", "0.01", "--out-dir", s(&pred)]);
    assert_eq!(fs::read_dir(pred.join("labels")).unwrap().count(), fs::read_dir(&images).unwrap().count());
    assert!(pred.join("annotated").is_dir());

    let rep = tmp.path().join("report");
    let report_json = eval.join("report.json");
    ok(&["report", "--report", s(&report_json), "--out-dir", s(&rep)]);
    for f in ["strata.md", "strata.csv", "counts.csv", "scatter_field_count.svg", "scatter_label_count.svg"] {
        assert!(rep.join(f).is_file(), "missing {f}");
    }
}
