use std::fs;
use std::path::Path;

use resgen_core::pipeline::{run_pipeline, PipelineConfig, ResilienceSettings};

fn tiny(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::desk(seed);
    cfg.dataset.size = 24;
    cfg.dataset.synth.n = 10;
    cfg.batch = 6;
    cfg.top_c = 2;
    cfg.max_iterations = 3;
    cfg.min_iterations = 3;
    cfg.estimator_train.epochs = 3;
    cfg.generator_train.epochs = 1;
    cfg.generator.latent_dim = 4;
    cfg.generator.hidden = 8;
    cfg.generator.encoder_rounds = 1;
    cfg.ascent_steps = 3;
    cfg.retrain.generator_sample = 6;
    cfg.retrain.estimator_epochs = 1;
    cfg.resilience = Some(ResilienceSettings {
        samples: 10,
        ..ResilienceSettings::default()
    });
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn best_estimate_never_worsens_with_a_fixed_estimator() {
    for seed in 0..2 {
        let mut cfg = tiny(seed);
        cfg.retrain.finetune_estimator = false;
        cfg.max_iterations = 4;
        cfg.min_iterations = 4;
        let dir = tempfile::tempdir().unwrap();
        let summary = run_pipeline(cfg, dir.path()).unwrap();
        assert_eq!(summary.records.len(), 4);
        for w in summary.records.windows(2) {
            assert!(w[1].best_estimated_q >= w[0].best_estimated_q, "seed {seed}: {w:?}");
        }
    }
}

#[test]
fn runs_are_identical_across_thread_counts() {
    let run = |threads: usize| {
        let dir = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_pipeline(tiny(7), dir.path())).unwrap();
        files(dir.path())
    };
    let serial = run(1);
    assert!(serial.iter().any(|(name, _)| name == "records.csv"));
    assert_eq!(serial, run(3));
    assert_eq!(serial, run(1));
}
