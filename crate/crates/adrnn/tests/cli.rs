//! End-to-end checks of the `adrnn` binary: exit codes, artifact
//! layout, and determinism of the generation and analysis commands.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use adrnn::cells::{CellArch, CellKind};
use adrnn::model::{HaltMode, ModelConfig, TaskKind};
use adrnn::tape::LnScope;
use adrnn::train::TrainConfig;

fn adrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adrnn"))
        .args(args)
        .output()
        .expect("spawn adrnn")
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.insert(
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            );
        }
    }
    out
}

#[test]
fn gen_is_bitwise_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let r = adrnn(&[
            "gen", "pathfinder", "--length", "3", "--image-px", "32", "--count", "6", "--seed",
            "9", "--out", out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b), "identical bytes on re-run");
    assert!(a.join("provenance.json").exists());
}

#[test]
fn gen_mazes_rejects_even_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let r = adrnn(&[
        "gen", "mazes", "--grid", "4", "--count", "2", "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2), "even grid is a config error");
    let err: serde_json::Value =
        serde_json::from_slice(&r.stderr).expect("JSON error on stderr");
    assert_eq!(err["exit_code"], 2);
    assert!(err["error"].is_string());
}

fn tiny_model_json() -> serde_json::Value {
    let cfg = ModelConfig {
        task: TaskKind::Pathfinder,
        cell: CellArch {
            kind: CellKind::ConvGru,
            d: 4,
            k: 3,
            ln_scope: LnScope::Channels,
            ln_eps: 1e-5,
        },
        in_channels: 1,
        input_kernel: 3,
        halting: adrnn::halting::HaltingConfig {
            t_train: 2,
            t_inference: 2,
            ..Default::default()
        },
        halt_mode: HaltMode::Act,
    };
    serde_json::to_value(&cfg).unwrap()
}

#[test]
fn train_eval_analyze_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let shard = tmp.path().join("shard");
    let r = adrnn(&[
        "gen", "pathfinder", "--length", "3", "--image-px", "32", "--count", "40", "--seed",
        "3", "--out", shard.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let out_dir = tmp.path().join("run");
    let train = TrainConfig {
        batch_size: 8,
        epochs: 1,
        max_val_samples: 8,
        ..Default::default()
    };
    let rc = serde_json::json!({
        "format_version": 1,
        "model": tiny_model_json(),
        "train": serde_json::to_value(&train).unwrap(),
        "data": [shard],
        "out_dir": out_dir,
    });
    let cfg_path = tmp.path().join("run.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&rc).unwrap()).unwrap();
    let r = adrnn(&["train", cfg_path.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out_dir.join("metrics.jsonl").exists());
    assert!(out_dir.join("provenance.json").exists());
    let ckpt = out_dir.join("checkpoint");
    assert!(ckpt.join("model.json").exists());

    // Eval below the training budget is a config error (exit 2).
    let eval_dir = tmp.path().join("eval");
    let r = adrnn(&[
        "eval", ckpt.to_str().unwrap(), shard.to_str().unwrap(), "--t-inference", "1", "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));

    // A proper eval writes report.json + halting.csv + provenance.json.
    let r = adrnn(&[
        "eval", ckpt.to_str().unwrap(), shard.to_str().unwrap(), "--t-inference", "4", "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["t_train"], 2, "extrapolation report shape");
    assert_eq!(report["t_inference"], 4);
    assert_eq!(report["full"]["count"], 40);
    assert!(eval_dir.join("provenance.json").exists());

    // Analyze reproduces correlations computed directly from the CSV.
    let csv = eval_dir.join("halting.csv");
    let summary_path = tmp.path().join("summary.json");
    let r = adrnn(&[
        "analyze", csv.to_str().unwrap(), "--out", summary_path.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&summary_path).unwrap()).unwrap();
    assert_eq!(summary["count"], 40);
    let records = adrnn::eval::read_halting_csv(&csv).unwrap();
    let x: Vec<f64> = records.iter().map(|r| r.difficulty).collect();
    let y: Vec<f64> = records.iter().map(|r| r.t_halt as f64).collect();
    let rho = summary["spearman_rho"].as_f64().unwrap();
    assert!((rho - adrnn::eval::spearman(&x, &y)).abs() < 1e-12);
}

#[test]
fn train_rejects_unknown_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let rc = serde_json::json!({
        "format_version": 1,
        "model": tiny_model_json(),
        "train": serde_json::to_value(&TrainConfig::default()).unwrap(),
        "data": [],
        "out_dir": tmp.path().join("run"),
        "surprise": true,
    });
    let cfg_path = tmp.path().join("bad.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&rc).unwrap()).unwrap();
    let r = adrnn(&["train", cfg_path.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2), "unknown key rejected");
    let err: serde_json::Value = serde_json::from_slice(&r.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("surprise"));
}

#[test]
fn train_rejects_wrong_format_version() {
    let tmp = tempfile::tempdir().unwrap();
    let rc = serde_json::json!({
        "format_version": 99,
        "model": tiny_model_json(),
        "train": serde_json::to_value(&TrainConfig::default()).unwrap(),
        "data": [],
        "out_dir": tmp.path().join("run"),
    });
    let cfg_path = tmp.path().join("v99.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&rc).unwrap()).unwrap();
    let r = adrnn(&["train", cfg_path.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn eval_missing_checkpoint_is_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let r = adrnn(&[
        "eval",
        tmp.path().join("nope").to_str().unwrap(),
        tmp.path().join("also-nope").to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(3), "I/O failure is a runtime error");
}
