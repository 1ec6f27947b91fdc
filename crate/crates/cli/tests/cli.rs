use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn msfcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msfcn"))
        .args(args)
        .env("MSFCN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A small 32x32 experiment rooted at `dir`.
fn config(dir: &Path, kind: &str, order: usize, train: Value) -> Value {
    json!({
        "model": {
            "kind": kind,
            "order": order,
            "num_classes": 3,
            "input_size": [32, 32],
            "encoder": {"stage_channels": [4, 8, 16], "blocks_per_stage": 1}
        },
        "train": train,
        "data": {
            "root": dir.join("data"),
            "seed": 7,
            "sequences": 8,
            "scene": {
                "height": 32, "width": 32, "num_classes": 3,
                "radius": [4.0, 6.0], "speed": [1.0, 2.0], "sequence_length": 4
            }
        },
        "output_dir": dir.join(format!("run_{kind}_{order}")),
    })
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let o = msfcn(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &config(dir.path(), "FCN", 1, json!({})));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run_ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert!(stdout(&o).contains("wrote 8 sequences"), "{}", stdout(&o));
    run_ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert!(fa.len() > 8 * 8);
    assert!(fa == fb, "datasets differ");
}

#[test]
fn invalid_size_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = config(dir.path(), "FCN", 1, json!({}));
    value["data"]["scene"]["height"] = json!(50);
    let cfg = write_config(dir.path(), "c.json", &value);
    let o = msfcn(&["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("multiple of 32"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = config(dir.path(), "FCN", 1, json!({}));
    value["train"]["lr"] = json!(0.1);
    let cfg = write_config(dir.path(), "c.json", &value);
    let o = msfcn(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown field"), "{}", stderr(&o));
}

#[test]
fn train_eval_predict_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let train = json!({"max_epochs": 3, "patience": 1, "learning_rate": 1e-3});
    let value = config(dir.path(), "MSFCN", 3, train);
    let cfg = write_config(dir.path(), "c.json", &value);
    run_ok(&["generate", "--config", cfg.to_str().unwrap()]);
    let o = run_ok(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(stdout(&o).contains("MSFCN-3"), "{}", stdout(&o));

    let out = PathBuf::from(value["output_dir"].as_str().unwrap());
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let reason = report["training"]["stop_reason"].as_str().unwrap();
    assert!(["early_stopping", "max_epochs"].contains(&reason), "{reason}");
    assert!(report["test_metrics"]["mean_iou"].is_number());
    let best = out.join("best.ckpt");
    assert!(best.is_file() && out.join("last.ckpt").is_file());

    // Eval writes a metrics file with one IoU slot per class.
    let data = dir.path().join("data");
    let eval_json = dir.path().join("eval.json");
    run_ok(&[
        "eval", "--checkpoint", best.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--split", "val", "--out", eval_json.to_str().unwrap(),
    ]);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(&eval_json).unwrap()).unwrap();
    assert_eq!(metrics["per_class_iou"].as_array().unwrap().len(), 3);

    // Predict needs exactly three frames and writes labels within range.
    let seq = fs::read_dir(data.join("test")).unwrap().next().unwrap().unwrap().path();
    let frames: Vec<String> = (0..3)
        .map(|t| seq.join(format!("frame_{t:05}.ppm")).to_str().unwrap().to_string())
        .collect();
    let mask = dir.path().join("mask.pgm");
    let overlay = dir.path().join("overlay.ppm");
    let mut args = vec!["predict", "--checkpoint", best.to_str().unwrap(), "--frames"];
    args.extend(frames.iter().map(String::as_str));
    args.extend(["--out", mask.to_str().unwrap(), "--overlay", overlay.to_str().unwrap()]);
    run_ok(&args);
    let bytes = fs::read(&mask).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    let labels = &bytes[bytes.len() - 32 * 32..];
    assert!(labels.iter().all(|&l| l < 3));
    assert!(fs::read(&overlay).unwrap().starts_with(b"P6\n32 32\n255\n"));

    let mut short = vec!["predict", "--checkpoint", best.to_str().unwrap(), "--frames"];
    short.extend(frames[..2].iter().map(String::as_str));
    let o = msfcn(&short);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("expected 3 frames"), "{}", stderr(&o));

    let o = run_ok(&["inspect", "--checkpoint", out.join("last.ckpt").to_str().unwrap()]);
    let text = stdout(&o);
    assert!(text.contains("MSFCN-3") && text.contains("encoder2.stem.weight"), "{text}");
    assert!(text.contains("optimizer   adam"), "{text}");

    // A truncated checkpoint is reported with the record it broke in.
    let cut = dir.path().join("cut.ckpt");
    let full = fs::read(&best).unwrap();
    fs::write(&cut, &full[..full.len() - 10]).unwrap();
    let o = msfcn(&["inspect", "--checkpoint", cut.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("record"), "{}", stderr(&o));
}

#[test]
fn eval_of_empty_split_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let value = config(dir.path(), "FCN", 1, json!({"max_epochs": 1, "patience": 1}));
    let cfg = write_config(dir.path(), "c.json", &value);
    run_ok(&["generate", "--config", cfg.to_str().unwrap()]);
    run_ok(&["train", "--config", cfg.to_str().unwrap()]);
    let best = PathBuf::from(value["output_dir"].as_str().unwrap()).join("best.ckpt");
    // Remove every test sequence from the manifest.
    let data = dir.path().join("data");
    let manifest = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "json"))
        .unwrap();
    let mut m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    m["splits"]["test"] = json!([]);
    let kept: Vec<Value> = m["sequences"].as_array().unwrap().iter().filter(|s| s["split"] != "test").cloned().collect();
    m["sequences"] = json!(kept);
    fs::write(&manifest, m.to_string()).unwrap();
    let o = msfcn(&["eval", "--checkpoint", best.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("no samples"), "{}", stderr(&o));
}

#[test]
fn tied_encoders_share_one_parameter_set() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = config(dir.path(), "MSFCN", 2, json!({"max_epochs": 1, "patience": 1}));
    value["model"]["tie_encoders"] = json!(true);
    let cfg = write_config(dir.path(), "c.json", &value);
    run_ok(&["generate", "--config", cfg.to_str().unwrap()]);
    run_ok(&["train", "--config", cfg.to_str().unwrap()]);
    let best = PathBuf::from(value["output_dir"].as_str().unwrap()).join("best.ckpt");
    let text = stdout(&run_ok(&["inspect", "--checkpoint", best.to_str().unwrap()]));
    assert!(text.contains("encoder0.stem.weight"), "{text}");
    assert!(!text.contains("encoder1."), "{text}");
}

#[test]
fn divergence_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let value = config(dir.path(), "FCN", 1, json!({"learning_rate": 1e30, "max_epochs": 5}));
    let cfg = write_config(dir.path(), "c.json", &value);
    run_ok(&["generate", "--config", cfg.to_str().unwrap()]);
    let o = msfcn(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn shipped_configs_match_the_camouflage_preset() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = msfcn::config::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(cfg.data.scene, msfcn::data::SceneConfig::camouflage(), "{}", path.display());
        assert_eq!((cfg.train.max_epochs, cfg.train.patience), (30, 3));
        seen += 1;
    }
    assert_eq!(seen, 3);
}
