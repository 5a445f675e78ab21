use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use resgen_core::estimator::{estimate_batch, train_estimator, EstimatorModel};
use resgen_core::flow::{evaluate, LabelWeights};
use resgen_core::generator::{
    decode, latent_ascent, sample_prior, train_generator, DecodeMode, DecodeOptions, GeneratorModel,
};
use resgen_core::graph::{self, DesignGraph};
use resgen_core::pipeline::{
    emit_report, post_process, resume_pipeline, run_pipeline, LabelKind, PipelineConfig, ResilienceSettings,
};
use resgen_core::resilience::{edns, write_simulation_csv, DisruptionModel};
use resgen_core::seed::derive_seed;
use resgen_core::synth::build_dataset;
use resgen_core::{Error, Result};

#[derive(Parser)]
#[command(name = "resgen", version, about = "Generate, score and stress-test network designs")]
struct Cli {
    /// Pipeline configuration JSON; a preset is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used without `--config`.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Master seed; overrides the configuration's seed and dataset seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 10,000 designs, 500 candidates, 150 iterations.
    Full,
    /// 500 designs, 50 candidates, 20 iterations.
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Sample,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled synthetic dataset to `dataset.jsonl`.
    GenDataset {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pretrain the estimator; writes `estimator.ckpt` and its history.
    TrainEstimator {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Pretrain the generator; writes `generator.ckpt` and its history.
    TrainGenerator {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode designs from prior samples into `generated.jsonl`.
    Generate {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
        /// Node count of every design; drawn from the training sizes when absent.
        #[arg(long)]
        nodes: Option<usize>,
        /// Push latents toward this metric value before decoding.
        #[arg(long)]
        target: Option<f64>,
        /// Score the designs with this estimator.
        #[arg(long)]
        estimator: Option<PathBuf>,
    },
    /// Run the full generate, select, blend and retrain loop.
    Optimize {
        /// Continue the run in `--out-dir`.
        #[arg(long)]
        resume: bool,
    },
    /// Monte Carlo disruption simulation of one design.
    Simulate {
        #[arg(long)]
        design: PathBuf,
        /// Line of a JSON-lines design file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        p0: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Rebuild the summaries of a run directory.
    Report {
        /// Run directory; `--out-dir` when absent.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Also rank retained designs by expected demand not supplied.
        #[arg(long)]
        post_process: bool,
    },
    /// Flow metrics of one design.
    Evaluate {
        #[arg(long)]
        design: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_json(&fs::read_to_string(path)?)?,
        None => match cli.preset {
            Preset::Full => PipelineConfig::default(),
            Preset::Desk => PipelineConfig::desk(0),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.dataset.synth.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn read_dataset(path: &Path) -> Result<(Vec<DesignGraph>, Vec<f64>)> {
    let rows = graph::read_jsonl(BufReader::new(fs::File::open(path)?))?;
    let mut graphs = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (i, (g, l)) in rows.into_iter().enumerate() {
        labels.push(l.ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "missing `label`".into(),
        })?);
        graphs.push(g);
    }
    Ok((graphs, labels))
}

fn dataset_for(cli: &Cli, cfg: &PipelineConfig, explicit: &Option<PathBuf>) -> Result<(Vec<DesignGraph>, Vec<f64>)> {
    let path = explicit
        .clone()
        .or_else(|| cfg.dataset.path.clone())
        .unwrap_or_else(|| cli.out_dir.join("dataset.jsonl"));
    if path.exists() {
        return read_dataset(&path);
    }
    let data = build_dataset(cfg.dataset.size, &cfg.dataset.synth)?;
    Ok((data.graphs, data.labels))
}

/// A design from a JSON file, or line `index` of a JSON-lines file.
fn read_design(path: &Path, index: usize) -> Result<DesignGraph> {
    let text = fs::read_to_string(path)?;
    if path.extension().is_some_and(|x| x == "jsonl") {
        let rows = graph::read_jsonl(text.as_bytes())?;
        let n = rows.len();
        return rows
            .into_iter()
            .nth(index)
            .map(|(g, _)| g)
            .ok_or_else(|| Error::Config(format!("index {index} beyond {n} designs")));
    }
    graph::deserialize(&text)
}

fn label_weights(cfg: &PipelineConfig) -> LabelWeights {
    match cfg.label {
        LabelKind::Combined(w) => w,
        LabelKind::MaxFlow => LabelWeights::default(),
    }
}

fn run(cli: &Cli) -> Result<Value> {
    let cfg = load_config(cli)?;
    let out = &cli.out_dir;
    fs::create_dir_all(out)?;
    match &cli.command {
        Command::GenDataset { count } => {
            let data = build_dataset(count.unwrap_or(cfg.dataset.size), &cfg.dataset.synth)?;
            let path = out.join("dataset.jsonl");
            data.write_jsonl(create(&path)?)?;
            let mean = data.labels.iter().sum::<f64>() / data.len() as f64;
            Ok(json!({ "path": path, "designs": data.len(), "label_mean": mean }))
        }
        Command::TrainEstimator { dataset, epochs } => {
            let (graphs, labels) = dataset_for(cli, &cfg, dataset)?;
            let profile = graphs[0].profile.clone();
            let model = EstimatorModel::new(cfg.estimator.clone(), &profile, cfg.objective, cfg.seed)?;
            let mut tc = cfg.estimator_train.clone();
            tc.seed = cfg.seed;
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let (model, hist) = train_estimator(model, &graphs, &labels, &tc)?;
            model.save(create(&out.join("estimator.ckpt"))?)?;
            hist.write_csv(create(&out.join("estimator_history.csv"))?)?;
            Ok(json!({ "checkpoint": out.join("estimator.ckpt"), "best": hist.best() }))
        }
        Command::TrainGenerator { dataset, epochs } => {
            let (graphs, labels) = dataset_for(cli, &cfg, dataset)?;
            let profile = graphs[0].profile.clone();
            let model = GeneratorModel::new(
                cfg.generator.clone(),
                &profile,
                cfg.objective,
                cfg.dataset.synth.clone(),
                cfg.seed,
            )?;
            let mut tc = cfg.generator_train.clone();
            tc.seed = cfg.seed;
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let (model, hist) = train_generator(model, &graphs, &labels, &tc)?;
            model.save(create(&out.join("generator.ckpt"))?)?;
            hist.write_csv(create(&out.join("generator_history.csv"))?)?;
            Ok(json!({ "checkpoint": out.join("generator.ckpt"), "last": hist.records.last() }))
        }
        Command::Generate {
            generator,
            count,
            mode,
            nodes,
            target,
            estimator,
        } => {
            let model = GeneratorModel::load(BufReader::new(fs::File::open(generator)?))?;
            let mode = match mode {
                Mode::Greedy => DecodeMode::Greedy,
                Mode::Sample => DecodeMode::Sample,
            };
            let mut designs = Vec::with_capacity(*count);
            for k in 0..*count {
                let seed = derive_seed(cfg.seed, 0, k as u64);
                let mut code = sample_prior(&model, *nodes, seed);
                if let Some(q) = target {
                    code = latent_ascent(&model, &code, *q, cfg.ascent_steps, cfg.ascent_step_size)?.code;
                }
                designs.push(decode(&model, &code, &DecodeOptions::new(mode, seed))?);
            }
            let labels = designs
                .iter()
                .map(|g| cfg.label.label(g))
                .collect::<Result<Vec<_>>>()?;
            let path = out.join("generated.jsonl");
            graph::write_jsonl(create(&path)?, &designs, Some(&labels))?;
            let estimates = match estimator {
                Some(p) => {
                    let est = EstimatorModel::load(BufReader::new(fs::File::open(p)?))?;
                    Some(estimate_batch(&est, &designs)?)
                }
                None => None,
            };
            Ok(json!({ "path": path, "designs": designs.len(), "labels": labels, "estimates": estimates }))
        }
        Command::Optimize { resume } => {
            let summary = if *resume {
                resume_pipeline(out)?
            } else {
                run_pipeline(cfg, out)?
            };
            Ok(json!({
                "run_dir": out,
                "iterations": summary.iterations,
                "converged": summary.converged,
                "final": summary.records.last(),
                "best_id": summary.best.as_ref().map(|b| &b.id),
            }))
        }
        Command::Simulate {
            design,
            index,
            samples,
            grid,
            p0,
            gamma,
        } => {
            let g = read_design(design, *index)?;
            let base = cfg.resilience.clone().unwrap_or_default();
            let model = DisruptionModel {
                grid: grid.unwrap_or(base.model.grid),
                p0: p0.unwrap_or(base.model.p0),
                gamma: gamma.unwrap_or(base.model.gamma),
                ..base.model
            };
            let est = edns(&g, &model, samples.unwrap_or(base.samples), cfg.seed)?;
            let path = out.join("simulation.csv");
            write_simulation_csv(create(&path)?, &est)?;
            Ok(json!({ "path": path, "edns": est.edns, "stderr": est.stderr, "samples": est.samples.len() }))
        }
        Command::Report { run, post_process: post } => {
            let dir = run.clone().unwrap_or_else(|| out.clone());
            let report = emit_report(&dir)?;
            let ranked = if *post {
                let settings: ResilienceSettings = cfg.resilience.clone().unwrap_or_default();
                Some(post_process(&dir, &settings)?)
            } else {
                None
            };
            Ok(json!({
                "run_dir": dir,
                "iterations": report.iterations,
                "designs": report.designs.len(),
                "optimal": ranked.as_ref().and_then(|r| r.optimal.clone()),
            }))
        }
        Command::Evaluate { design, index } => {
            let g = read_design(design, *index)?;
            let issues: Vec<String> = graph::validate(&g).iter().map(|v| format!("{v:?}")).collect();
            let metrics = evaluate(&g, label_weights(&cfg))?;
            Ok(json!({ "metrics": metrics, "violations": issues }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
