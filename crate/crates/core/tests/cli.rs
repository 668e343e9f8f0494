use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mner"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn synth(dir: &Path, signal: &str) {
    let out = mner(&[
        "synth", "--seed", "5", "--signal", signal, "--out", dir.to_str().unwrap(),
        "--n-train", "30", "--n-dev", "10", "--n-test", "20", "--feature-dim", "8",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn config(model: &str, data: &Path, out: &Path, extra: Value) -> Value {
    let mut c = json!({
        "model": model,
        "encoder": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "max_len": 64,
                    "char_dim": 4, "char_filters": 4, "dropout": 0.0},
        "epochs": 2,
        "batch_size": 8,
        "seed": 3,
        "data": {
            "train": data.join("train.txt"),
            "dev": data.join("dev.txt"),
            "test": data.join("test.txt"),
            "global_features": data.join("global.jsonl"),
            "regional_features": data.join("regional.jsonl"),
        },
        "output_dir": out,
        "ablation": {"seeds": [1], "fractions": [0.5, 1.0]},
    });
    for (k, v) in extra.as_object().unwrap() {
        c[k] = v.clone();
    }
    c
}

fn write_config(path: &Path, value: &Value) -> String {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "caption");
    synth(&b, "caption");
    for f in ["train.txt", "dev.txt", "test.txt", "global.jsonl", "regional.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(code(&mner(&["synth", "--seed", "1", "--signal", "loud", "--out", "x"])), 2);
}

#[test]
fn train_evaluate_and_dump_attention() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    synth(&data, "caption");
    let cfg = write_config(&tmp.path().join("cam.json"), &config("bert_cam_crf", &data, &runs, json!({})));
    let out = mner(&["train", "--config", &cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = runs.join("bert_cam_crf.ckpt");
    assert!(ckpt.exists() && runs.join("bert_cam_crf.report.json").exists());
    let (ckpt, test, global) = (
        ckpt.to_str().unwrap(),
        data.join("test.txt"),
        data.join("global.jsonl"),
    );
    let (test, global) = (test.to_str().unwrap(), global.to_str().unwrap());

    let report = tmp.path().join("report.json");
    let out = mner(&["evaluate", "--checkpoint", ckpt, "--data", test, "--features", global, "--json", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(parsed["overall"]["f1"].is_number());

    // the image model cannot be scored without its sidecar
    assert_eq!(code(&mner(&["evaluate", "--checkpoint", ckpt, "--data", test])), 3);

    let dump = tmp.path().join("att.jsonl");
    let out = mner(&["dump-attention", "--checkpoint", ckpt, "--data", test, "--features", global, "--out", dump.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines = std::fs::read_to_string(&dump).unwrap();
    assert_eq!(lines.lines().count(), 20);
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert!(first["diagnostics"]["visual_attention"].is_object());
}

#[test]
fn matrix_and_ablations() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    synth(&data, "caption");
    let configs = tmp.path().join("configs");
    std::fs::create_dir_all(&configs).unwrap();
    write_config(&configs.join("a.json"), &config("bert_crf", &data, &runs, json!({})));
    let caption = write_config(&configs.join("b.json"), &config("bert_caption_crf", &data, &runs, json!({})));

    let out_dir = tmp.path().join("matrix");
    let out = mner(&["matrix", "--configs", configs.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("name,model,status,precision,recall,f1"));

    let buckets = mner::pipeline::ExperimentConfig::default().ablation.length_edges.len() + 1;
    for (mode, rows) in [("length", 1 + 2 * buckets), ("size", 1 + 2 * 2)] {
        let csv_path = tmp.path().join(format!("{mode}.csv"));
        let out = mner(&["ablate", "--mode", mode, "--config", &caption, "--out", csv_path.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{mode}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(std::fs::read_to_string(&csv_path).unwrap().lines().count(), rows, "{mode}");
    }
}

#[test]
fn exit_codes_by_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    synth(&data, "none");

    // config errors
    let bad_json = tmp.path().join("bad.json");
    std::fs::write(&bad_json, "{ not json").unwrap();
    assert_eq!(code(&mner(&["train", "--config", bad_json.to_str().unwrap()])), 2);
    let unknown_key = write_config(&tmp.path().join("k.json"), &config("bert_crf", &data, &runs, json!({"colour": 1})));
    assert_eq!(code(&mner(&["train", "--config", &unknown_key])), 2);
    let pairing = write_config(&tmp.path().join("p.json"), &config("vbert_tam_crf", &data, &runs, json!({"feature_kind": "global"})));
    assert_eq!(code(&mner(&["train", "--config", &pairing])), 2);
    assert_eq!(code(&mner(&["train", "--config", tmp.path().join("absent.json").to_str().unwrap()])), 2);

    // data errors
    let mut missing = config("bert_crf", &data, &runs, json!({}));
    missing["data"]["train"] = json!(data.join("nope.txt"));
    let missing = write_config(&tmp.path().join("m.json"), &missing);
    assert_eq!(code(&mner(&["train", "--config", &missing])), 3);
    let garbage = tmp.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let test = data.join("test.txt");
    assert_eq!(code(&mner(&["evaluate", "--checkpoint", garbage.to_str().unwrap(), "--data", test.to_str().unwrap()])), 3);
    let broken = tmp.path().join("broken.txt");
    std::fs::write(&broken, "token-without-label\n").unwrap();
    let mut bad_corpus = config("bert_crf", &data, &runs, json!({}));
    bad_corpus["data"]["dev"] = json!(broken);
    let bad_corpus = write_config(&tmp.path().join("b.json"), &bad_corpus);
    assert_eq!(code(&mner(&["train", "--config", &bad_corpus])), 3);

    // numerical abort: a learning rate that overflows the parameters
    let blowup = write_config(
        &tmp.path().join("n.json"),
        &config("bert_crf", &data, &runs, json!({"optimizer": {"lr": 1e300}})),
    );
    let out = mner(&["train", "--config", &blowup]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
