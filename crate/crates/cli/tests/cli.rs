use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use resgen_core::pipeline::{read_records_csv, PipelineConfig, ResilienceSettings};
use serde_json::Value;

fn resgen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resgen"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = PipelineConfig::desk(5);
    cfg.dataset.size = 16;
    cfg.dataset.synth.n = 10;
    cfg.batch = 4;
    cfg.top_c = 2;
    cfg.max_iterations = 2;
    cfg.min_iterations = 2;
    cfg.estimator_train.epochs = 2;
    cfg.generator_train.epochs = 1;
    cfg.generator.latent_dim = 4;
    cfg.generator.hidden = 8;
    cfg.generator.encoder_rounds = 1;
    cfg.ascent_steps = 2;
    cfg.retrain.generator_sample = 4;
    cfg.retrain.estimator_epochs = 1;
    cfg.resilience = Some(ResilienceSettings {
        samples: 8,
        ..ResilienceSettings::default()
    });
    let path = dir.join("config.in.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn dataset_evaluate_and_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let v = stdout_json(&resgen(dir.path(), &["--config", &cfg, "gen-dataset", "--count", "3"]));
    assert_eq!(v["designs"], 3);
    let data = dir.path().join("dataset.jsonl");
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 3);

    let data = data.to_string_lossy().into_owned();
    let v = stdout_json(&resgen(dir.path(), &["evaluate", "--design", &data, "--index", "2"]));
    assert!(v["metrics"]["f_max"].as_f64().unwrap() > 0.0);
    assert_eq!(v["violations"].as_array().unwrap().len(), 0);

    let v = stdout_json(&resgen(
        dir.path(),
        &["simulate", "--design", &data, "--samples", "25", "--grid", "4"],
    ));
    assert_eq!(v["samples"], 25);
    let csv = fs::read_to_string(dir.path().join("simulation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sample,epicenter_row,epicenter_col,failed_nodes,failed_edges,C_e");
    assert_eq!(lines.len(), 27);
    assert!(lines[26].starts_with("# edns="));
}

#[test]
fn train_and_generate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    stdout_json(&resgen(dir.path(), &["--config", &cfg, "gen-dataset"]));
    let v = stdout_json(&resgen(dir.path(), &["--config", &cfg, "train-estimator", "--epochs", "2"]));
    assert!(v["best"]["val_mse"].is_number());
    stdout_json(&resgen(dir.path(), &["--config", &cfg, "train-generator"]));
    let generator = dir.path().join("generator.ckpt").to_string_lossy().into_owned();
    let estimator = dir.path().join("estimator.ckpt").to_string_lossy().into_owned();
    let v = stdout_json(&resgen(
        dir.path(),
        &[
            "--config", &cfg, "generate", "--generator", &generator, "--estimator", &estimator, "--count", "3",
            "--mode", "sample", "--target", "20",
        ],
    ));
    assert_eq!(v["designs"], 3);
    assert_eq!(v["estimates"].as_array().unwrap().len(), 3);
}

#[test]
fn optimize_report_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let v = stdout_json(&resgen(&run, &["--config", &cfg, "optimize"]));
    assert_eq!(v["iterations"], 2);
    let records = read_records_csv(fs::File::open(run.join("records.csv")).unwrap()).unwrap();
    assert_eq!(records.len(), 2);
    assert!(run.join("checkpoints/generator.ckpt").exists());
    assert!(run.join("best_design.json").exists());

    let v = stdout_json(&resgen(&run, &["--config", &cfg, "report", "--post-process"]));
    assert_eq!(v["iterations"], 2);
    assert!(v["optimal"].is_string());
    assert!(run.join("postprocess.csv").exists());

    // A finished run resumes to the same records.
    let before = fs::read(run.join("records.csv")).unwrap();
    let v = stdout_json(&resgen(&run, &["optimize", "--resume"]));
    assert_eq!(v["iterations"], 2);
    assert_eq!(fs::read(run.join("records.csv")).unwrap(), before);
}

#[test]
fn failures_print_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = resgen(dir.path(), &["evaluate", "--design", "missing.json"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");

    let mut cfg = PipelineConfig::desk(0);
    cfg.top_c = cfg.batch + 1;
    let path = dir.path().join("bad.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = resgen(dir.path(), &["--config", path.to_str().unwrap(), "gen-dataset"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}
