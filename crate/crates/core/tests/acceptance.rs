//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`cargo test --test acceptance`). Criteria 3 to 5
//! write their metric files to a scratch directory; criterion 9 reruns them
//! and compares bytes. The exit status is nonzero only when a criterion
//! cannot be evaluated at all.

mod common;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use resgen_core::diff::{gradient_check, CheckOptions, Tensor};
use resgen_core::estimator::{estimate_batch, train_estimator, EstimatorModel, PreparedGraph};
use resgen_core::flow::{augment_source_sink, min_cost_max_flow, Objective, Outage, SCALE};
use resgen_core::generator::{
    decode_with_trace, generator_loss, sample_prior, train_generator, Constraints, DecodeMode, DecodeOptions,
    GeneratorModel, LossWeights,
};
use resgen_core::graph::{validate, SYNTHETIC_PROFILE};
use resgen_core::pipeline::{run_pipeline, write_records_csv, IterationRecord, PipelineConfig};
use resgen_core::resilience::{edns, edns_exact, resilience_ratio, DisruptionModel, ExactEvent, PerformanceCurve};
use resgen_core::seed::rng_from;
use resgen_core::synth::{build_dataset, generate_design, SynthConfig};
use resgen_core::Result;

use common::{brute_force_flow, integer_instance, pair, pearson, star};

const PIPELINE_SEEDS: u64 = 10;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

fn gradient_fidelity() -> Result<Verdict> {
    let desk = PipelineConfig::desk(0);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..5u64 {
        let n = 4 + seed as usize;
        let g = generate_design(&SynthConfig { n, ..SynthConfig::default() }, seed)?;
        let gen_cfg = resgen_core::generator::GeneratorConfig {
            latent_dim: 3,
            hidden: 5,
            encoder_rounds: 2,
            ..desk.generator.clone()
        };
        let model = GeneratorModel::new(gen_cfg, SYNTHETIC_PROFILE, Objective::Maximize, SynthConfig::default(), seed)?;
        let eps = normal(&[n, 3], seed + 50);
        let variants = [
            ("kl", LossWeights { kl: 1.0, dec: 0.0, perf: 0.0 }),
            ("decoder", LossWeights { kl: 0.0, dec: 1.0, perf: 0.0 }),
            ("head", LossWeights { kl: 0.0, dec: 0.0, perf: 1.0 }),
            ("total", LossWeights::default()),
        ];
        let opts = CheckOptions {
            max_coords_per_tensor: Some(8),
            seed,
            ..CheckOptions::new(1e-4)
        };
        for (name, w) in variants {
            let mut grads = model.params.clone();
            grads.zero_grad();
            generator_loss(&model, &model.params, &g, Some(7.0), &eps, w, Some(&mut grads))?;
            let r = gradient_check(
                &grads,
                |p| Ok(generator_loss(&model, p, &g, Some(7.0), &eps, w, None)?.total),
                &opts,
            )?;
            worst = worst.max(r.max_rel_error);
            if !r.passed {
                failures.push(format!("{name}/seed {seed}"));
            }
        }

        let batch_graphs: Vec<_> = (0..5)
            .map(|i| generate_design(&SynthConfig { n: 4 + i, ..SynthConfig::default() }, seed * 10 + i as u64))
            .collect::<Result<_>>()?;
        let est = EstimatorModel::new(desk.estimator.clone(), SYNTHETIC_PROFILE, Objective::Maximize, seed)?;
        let prepared: Vec<PreparedGraph> = batch_graphs.iter().map(|g| est.prepare(g)).collect::<Result<_>>()?;
        let batch: Vec<(&PreparedGraph, f64)> =
            prepared.iter().enumerate().map(|(i, p)| (p, 1.0 + i as f64)).collect();
        let mut params = est.params.clone();
        params.zero_grad();
        est.batch_loss_grad(&params, &batch)?.1.accumulate_into(&mut params);
        let r = gradient_check(&params, |p| est.batch_loss(p, &batch), &CheckOptions::new(1e-4))?;
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            failures.push(format!("estimator/seed {seed}"));
        }
    }
    Ok(Verdict::new(
        failures.is_empty(),
        format!("4 generator losses + estimator MSE on 5 seeds; worst rel err {worst:.2e}; failed {failures:?}"),
    ))
}

fn flow_oracle() -> Result<Verdict> {
    let mut mismatches = 0;
    let instances = 600;
    for seed in 0..instances {
        let g = integer_instance(1_000_000 + seed, 6, 6);
        let res = min_cost_max_flow(&augment_source_sink(&g)?)?;
        let (flow, cost) = brute_force_flow(&g);
        // Exact in the solver's integer units.
        let unit = SCALE as i64;
        if res.flow_units != flow * unit || res.cost_units != (cost * unit * unit) as i128 {
            mismatches += 1;
        }
    }
    Ok(Verdict::new(
        mismatches == 0,
        format!("{instances} instances, {mismatches} mismatches"),
    ))
}

fn estimator_learning(dir: &Path) -> Result<Verdict> {
    let desk = PipelineConfig::desk(0);
    let synth = SynthConfig { seed: 31, ..SynthConfig::default() };
    let data = build_dataset(1000, &synth)?;
    let held_out = build_dataset(200, &SynthConfig { seed: 32, ..synth })?;
    let model = EstimatorModel::new(desk.estimator.clone(), SYNTHETIC_PROFILE, Objective::Maximize, 0)?;
    let cfg = resgen_core::estimator::TrainConfig {
        epochs: 200,
        ..desk.estimator_train.clone()
    };
    let (model, hist) = train_estimator(model, &data.graphs, &data.labels, &cfg)?;
    let first = hist.records[0].val_mse;
    let best = hist.best().expect("trained").val_mse;
    let q = estimate_batch(&model, &held_out.graphs)?;
    let r = pearson(&q, &held_out.labels);
    let mut csv = Vec::new();
    hist.write_csv(&mut csv)?;
    let mut text = String::from_utf8(csv).expect("utf8");
    writeln!(text, "# held_out_pearson={r:?}").unwrap();
    for v in &q {
        writeln!(text, "# q={v:?}").unwrap();
    }
    fs::write(dir.join("estimator.csv"), text)?;
    Ok(Verdict::new(
        best <= 0.5 * first && r > 0.8,
        format!(
            "val MSE epoch 1 {first:.3}, best {best:.3} (epoch {}), ratio {:.3}; held-out Pearson {r:.3}",
            hist.best_epoch,
            best / first
        ),
    ))
}

fn reconstruction_validity(dir: &Path) -> Result<(Verdict, Option<GeneratorModel>)> {
    let desk = PipelineConfig::desk(0);
    let data = build_dataset(500, &SynthConfig { seed: 41, ..SynthConfig::default() })?;
    let model = GeneratorModel::new(
        desk.generator.clone(),
        SYNTHETIC_PROFILE,
        Objective::Maximize,
        SynthConfig::default(),
        0,
    )?;
    let (model, hist) = train_generator(model, &data.graphs, &data.labels, &desk.generator_train)?;
    let (mut valid, mut sound, mut steps, mut runaway) = (0, 0, 0, 0);
    let mut log = String::new();
    for (e, r) in hist.records.iter().enumerate() {
        writeln!(log, "epoch {e}: {r:?}").unwrap();
    }
    for k in 0..100u64 {
        let code = sample_prior(&model, None, 9000 + k);
        match decode_with_trace(&model, &code, &DecodeOptions::new(DecodeMode::Greedy, 9000 + k)) {
            Ok((g, trace)) => {
                steps += trace.steps.len();
                if trace.is_sound() {
                    sound += 1;
                }
                if validate(&g).is_empty() {
                    valid += 1;
                }
                writeln!(log, "{}", g.to_json()).unwrap();
            }
            Err(e) => {
                runaway += 1;
                writeln!(log, "error {}", e.kind()).unwrap();
            }
        }
    }
    fs::write(dir.join("generator.txt"), log)?;
    let decoded = 100 - runaway;
    Ok((
        Verdict::new(
            valid >= 95 && sound == decoded,
            format!("{valid}/100 valid, {sound}/{decoded} decodes sound over {steps} steps, {runaway} hit the step guard"),
        ),
        Some(model),
    ))
}

fn pipeline_run(seed: u64, dir: &Path) -> Result<Vec<IterationRecord>> {
    let run_dir = dir.join(format!("run_{seed}"));
    let summary = run_pipeline(PipelineConfig::desk(seed), &run_dir)?;
    Ok(summary.records)
}

fn biasing_trend(runs: &[Vec<IterationRecord>]) -> Verdict {
    let mut improved = 0;
    let mut detail = Vec::new();
    for recs in runs {
        let (a, b) = (recs[0].mean_topc_q, recs[recs.len() - 1].mean_topc_q);
        if b > a {
            improved += 1;
        }
        detail.push(format!("{a:.1}->{b:.1}"));
    }
    Verdict::new(
        improved >= 8,
        format!("{improved}/{} seeds improved mean top-c Q: {}", runs.len(), detail.join(" ")),
    )
}

fn edns_correctness() -> Result<Verdict> {
    let g = star(&[5.0, 3.0]);
    let events = [
        ExactEvent {
            probability: 0.1,
            outage: Outage { failed_nodes: vec![], failed_edges: vec![0] },
        },
        ExactEvent {
            probability: 0.2,
            outage: Outage { failed_nodes: vec![], failed_edges: vec![1] },
        },
    ];
    let exact = edns_exact(&g, &events)?;
    let exact_ok = exact == 0.1 * 5.0 + 0.2 * 3.0 && (exact - 1.1).abs() <= f64::EPSILON * 2.0;

    let toy = pair(5.0, 2.0);
    let model = DisruptionModel {
        grid: 1,
        p0: 0.3,
        affect_nodes: false,
        ..DisruptionModel::default()
    };
    let expected = model.p0 * 2.0;
    let mut inside = 0;
    for seed in 0..20 {
        let est = edns(&toy, &model, 400, seed)?;
        if (est.edns - expected).abs() <= 3.0 * est.stderr {
            inside += 1;
        }
    }
    // Interval coverage over many more seeds, for context on a single miss.
    let mut covered = 0;
    for seed in 0..2000 {
        let est = edns(&toy, &model, 400, 10_000 + seed)?;
        if (est.edns - expected).abs() <= 3.0 * est.stderr {
            covered += 1;
        }
    }
    Ok(Verdict::new(
        exact_ok && inside == 20,
        format!(
            "exact {exact:?} (0.1*5 + 0.2*3); Monte Carlo within 3 SE of {expected} in {inside}/20 seeds; \
             3-SE coverage {:.2}% over 2000 further seeds (nominal 99.73%)",
            covered as f64 / 20.0
        ),
    ))
}

fn resilience_ratio_cases() -> Result<Verdict> {
    let times = vec![0.0, 0.5, 1.5, 3.0, 4.0];
    let nominal = PerformanceCurve::new(times.clone(), vec![4.0, 3.0, 5.0, 2.5, 4.0])?;
    let half = PerformanceCurve::new(times, nominal.values.iter().map(|v| v / 2.0).collect())?;
    let same = resilience_ratio(&nominal, &nominal)?;
    let halved = resilience_ratio(&half, &nominal)?;
    Ok(Verdict::new(
        (same - 1.0).abs() <= 1e-12 && (halved - 0.5).abs() <= 1e-12,
        format!("identical {same:?}, half-scaled {halved:?}"),
    ))
}

fn expansion(model: Option<&GeneratorModel>) -> Result<Verdict> {
    let Some(model) = model else {
        return Ok(Verdict::new(false, "no trained generator"));
    };
    let base = generate_design(&SynthConfig { n: 20, ..SynthConfig::default() }, 77)?;
    let b = base.node_count();
    let mut kept = 0;
    let mut grew = 0;
    for k in 0..100u64 {
        let code = sample_prior(model, Some(b + 2), 500 + k);
        let opts = DecodeOptions {
            constraints: Constraints {
                base: Some(base.clone()),
                ..Constraints::default()
            },
            ..DecodeOptions::new(DecodeMode::Greedy, 500 + k)
        };
        if let Ok(g) = decode_with_trace(model, &code, &opts).map(|(g, _)| g) {
            let inner: Vec<_> = g.edges.iter().filter(|e| e.u < b && e.v < b).cloned().collect();
            if g.nodes[..b] == base.nodes[..] && inner == base.edges {
                kept += 1;
            }
            if g.node_count() > b {
                grew += 1;
            }
        }
    }
    Ok(Verdict::new(
        kept == 100,
        format!("base preserved in {kept}/100 decodes; {grew} added new nodes"),
    ))
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    match (fs::read(a), fs::read(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn determinism(first: &Path, second: &Path) -> Result<Verdict> {
    estimator_learning(second)?;
    reconstruction_validity(second)?;
    let recs = pipeline_run(0, second)?;
    let mut csv = Vec::new();
    write_records_csv(&mut csv, &recs)?;
    fs::write(second.join("records_0.csv"), csv)?;
    let files = [
        PathBuf::from("estimator.csv"),
        PathBuf::from("generator.txt"),
        PathBuf::from("records_0.csv"),
        PathBuf::from("run_0/records.csv"),
        PathBuf::from("run_0/report.json"),
    ];
    let differing: Vec<_> = files
        .iter()
        .filter(|f| !same_bytes(&first.join(f), &second.join(f)))
        .map(|f| f.display().to_string())
        .collect();
    Ok(Verdict::new(
        differing.is_empty(),
        format!("reran criteria 3, 4 and seed 0 of 5; {} files compared, differing {differing:?}", files.len()),
    ))
}

fn edns_direction(runs: &[Vec<IterationRecord>]) -> Verdict {
    let mut ok = 0;
    let mut detail = Vec::new();
    for recs in runs {
        let first = recs[0].mean_topc_edns.unwrap_or(f64::NAN);
        let last = recs[recs.len() - 1].mean_topc_edns.unwrap_or(f64::NAN);
        if last <= first {
            ok += 1;
        }
        detail.push(format!("{first:.2}->{last:.2}"));
    }
    Verdict::new(
        ok >= 6,
        format!("{ok}/{} seeds with final top-c EDNS not above iteration 1: {}", runs.len(), detail.join(" ")),
    )
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let first = scratch.path().join("first");
    let second = scratch.path().join("second");
    fs::create_dir_all(&first).unwrap();
    fs::create_dir_all(&second).unwrap();

    let mut results: Vec<(u32, &str, Result<Verdict>, f64)> = Vec::new();
    let mut timed = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Result<Verdict>| {
        let start = Instant::now();
        let v = f();
        let secs = start.elapsed().as_secs_f64();
        let line = match &v {
            Ok(v) => format!("[{}] {n:>2} {name}: {} ({secs:.1}s)", if v.pass { "PASS" } else { "FAIL" }, v.detail),
            Err(e) => format!("[FAIL] {n:>2} {name}: error {e} ({secs:.1}s)"),
        };
        println!("{line}");
        results.push((n, name, v, secs));
    };

    timed(1, "gradient fidelity", &mut gradient_fidelity);
    timed(2, "flow oracle exactness", &mut flow_oracle);
    timed(3, "estimator learning", &mut || estimator_learning(&first));
    let mut generator = None;
    timed(4, "reconstruction validity", &mut || {
        let (v, m) = reconstruction_validity(&first)?;
        generator = m;
        Ok(v)
    });

    let mut runs = Vec::new();
    timed(5, "biasing trend", &mut || {
        for seed in 0..PIPELINE_SEEDS {
            let recs = pipeline_run(seed, &first)?;
            if seed == 0 {
                let mut csv = Vec::new();
                write_records_csv(&mut csv, &recs)?;
                fs::write(first.join("records_0.csv"), csv)?;
            }
            runs.push(recs);
        }
        Ok(biasing_trend(&runs))
    });
    timed(6, "EDNS correctness", &mut edns_correctness);
    timed(7, "resilience ratio", &mut resilience_ratio_cases);
    timed(8, "expansion constraints", &mut || expansion(generator.as_ref()));
    timed(9, "determinism", &mut || determinism(&first, &second));
    timed(10, "EDNS direction", &mut || {
        if runs.len() as u64 == PIPELINE_SEEDS {
            Ok(edns_direction(&runs))
        } else {
            Ok(Verdict::new(false, "pipeline runs incomplete"))
        }
    });

    let passed = results.iter().filter(|r| matches!(&r.2, Ok(v) if v.pass)).count();
    let errored: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    let total: f64 = results.iter().map(|r| r.3).sum();
    println!("acceptance: {passed}/{} criteria passed in {total:.0}s", results.len());
    if !errored.is_empty() {
        eprintln!("criteria that could not be evaluated: {errored:?}");
        std::process::exit(1);
    }
}
