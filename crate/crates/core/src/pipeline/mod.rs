//! The closed generate, estimate, select, blend and retrain loop.
//!
//! Each iteration samples candidate designs from perturbed encodings of the
//! best training designs, pushes their latents toward a target metric, decodes
//! them, ranks them with the estimator, relabels the top designs with the true
//! metric and swaps them in for the worst training designs before fine-tuning
//! both models.

mod report;

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{estimate_batch, train_estimator, EstimatorModel, EstimatorSpec, TrainConfig};
use crate::flow::{evaluate, LabelWeights, Objective};
use crate::generator::{
    decode, encode, latent_ascent, sample_prior, train_generator, DecodeMode, DecodeOptions, GeneratorConfig,
    GeneratorModel, GeneratorTrainConfig, LossWeights,
};
use crate::graph::{validate, DesignGraph, Profile, SYNTHETIC_PROFILE};
use crate::resilience::{edns, nominal_demand, DisruptionModel};
use crate::seed::{derive_seed, derived_rng, stream};
use crate::synth::{build_dataset, Dataset, SynthConfig};
use crate::diff::OptimizerRule;

pub use report::{
    emit_report, post_process, rank_by_edns, read_records_csv, read_retained, write_records_csv, DesignReport, PostProcessRow, PostProcessReport,
    RunReport, REPORT_SCHEMA_VERSION,
};

/// Where the initial training designs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    /// Labeled JSON-lines file; generated from `synth` when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub size: usize,
    /// Generation settings, also used to realize decoded designs.
    #[serde(default)]
    pub synth: SynthConfig,
}

/// Metric used to relabel designs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LabelKind {
    /// Maximum deliverable flow; zero for designs without a supply or
    /// demand node.
    MaxFlow,
    /// Weighted capacity ratio and edge cost.
    Combined(LabelWeights),
}

impl LabelKind {
    pub fn label(self, graph: &DesignGraph) -> Result<f64> {
        match self {
            LabelKind::MaxFlow => nominal_demand(graph),
            LabelKind::Combined(w) => evaluate(graph, w)?
                .combined_q
                .ok_or_else(|| Error::UndefinedMetric("design has no installed capacity".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainSchedule {
    pub generator_epochs: usize,
    pub estimator_epochs: usize,
    /// Designs per generator fine-tuning round.
    pub generator_sample: usize,
    #[serde(default)]
    pub generator_pick: FinetunePick,
    pub finetune_estimator: bool,
    /// Fine-tuning optimizers; the pretraining rules when absent.
    #[serde(default)]
    pub generator_rule: Option<OptimizerRule>,
    #[serde(default)]
    pub estimator_rule: Option<OptimizerRule>,
}

impl Default for RetrainSchedule {
    fn default() -> Self {
        RetrainSchedule {
            generator_epochs: 1,
            estimator_epochs: 2,
            generator_sample: 64,
            generator_pick: FinetunePick::default(),
            finetune_estimator: true,
            generator_rule: None,
            estimator_rule: None,
        }
    }
}

/// Which training designs the generator is fine-tuned on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetunePick {
    /// The best-labeled designs.
    #[default]
    Best,
    /// The newly blended designs plus a uniform draw from the rest.
    Random,
}

/// Disruption law and sample count for scoring designs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResilienceSettings {
    #[serde(default)]
    pub model: DisruptionModel,
    pub samples: usize,
    /// Event seed shared by every design so comparisons use matched draws.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ResilienceSettings {
    fn default() -> Self {
        ResilienceSettings {
            model: DisruptionModel::default(),
            samples: 200,
            seed: 0,
        }
    }
}

fn infinite_if_null<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSource,
    pub objective: Objective,
    pub label: LabelKind,
    /// Candidates per iteration.
    pub batch: usize,
    /// Designs selected and blended per iteration.
    pub top_c: usize,
    pub max_iterations: usize,
    /// Stop once the best estimated metric moves less than this; `null` in
    /// JSON means never converge early.
    #[serde(deserialize_with = "infinite_if_null")]
    pub tolerance: f64,
    pub min_iterations: usize,
    /// Fixed ascent target; when absent it is the best training label pushed
    /// 10% further in the objective direction.
    pub q_target: Option<f64>,
    pub ascent_steps: usize,
    pub ascent_step_size: f64,
    /// Share of candidates drawn from the prior instead of encodings.
    pub prior_fraction: f64,
    /// Keep the best design so far in every candidate pool.
    pub elitism: bool,
    /// Redraws allowed per candidate slot before the iteration fails.
    pub max_resamples: usize,
    pub retrain: RetrainSchedule,
    pub estimator: EstimatorSpec,
    pub estimator_train: TrainConfig,
    pub generator: GeneratorConfig,
    pub generator_train: GeneratorTrainConfig,
    pub resilience: Option<ResilienceSettings>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    /// Full-scale settings: 10,000 designs, 500 candidates, 150 iterations.
    fn default() -> Self {
        let f = Profile::synthetic().feature_count();
        PipelineConfig {
            dataset: DatasetSource {
                path: None,
                size: 10_000,
                synth: SynthConfig::default(),
            },
            objective: Objective::Maximize,
            label: LabelKind::MaxFlow,
            batch: 500,
            top_c: 50,
            max_iterations: 150,
            tolerance: 1e-6,
            min_iterations: 1,
            q_target: None,
            ascent_steps: 20,
            ascent_step_size: 0.1,
            prior_fraction: 0.0,
            elitism: true,
            max_resamples: 10,
            retrain: RetrainSchedule::default(),
            estimator: EstimatorSpec::default_for(f),
            estimator_train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            generator_train: GeneratorTrainConfig::default(),
            resilience: Some(ResilienceSettings::default()),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Small run that fits on one core in a few minutes: 500 designs,
    /// 50 candidates, 5 selected, 20 iterations.
    pub fn desk(seed: u64) -> Self {
        let f = Profile::synthetic().feature_count();
        let mut estimator = EstimatorSpec::default_for(f);
        estimator.gcn_widths = vec![f, 32, 32, 32];
        estimator.add_self_loops = true;
        PipelineConfig {
            dataset: DatasetSource {
                path: None,
                size: 500,
                synth: SynthConfig {
                    seed,
                    ..SynthConfig::default()
                },
            },
            batch: 50,
            top_c: 5,
            max_iterations: 20,
            tolerance: 1e-9,
            min_iterations: 20,
            estimator,
            estimator_train: TrainConfig {
                epochs: 80,
                ..TrainConfig::default()
            },
            generator: GeneratorConfig {
                latent_dim: 8,
                hidden: 16,
                ..GeneratorConfig::default()
            },
            generator_train: GeneratorTrainConfig {
                epochs: 12,
                rule: OptimizerRule::adam(1e-2),
                weights: LossWeights {
                    kl: 0.05,
                    dec: 1.0,
                    perf: 1.0,
                },
                ..GeneratorTrainConfig::default()
            },
            retrain: RetrainSchedule {
                generator_epochs: 2,
                estimator_epochs: 10,
                generator_rule: Some(OptimizerRule::adam(2e-3)),
                ..RetrainSchedule::default()
            },
            resilience: Some(ResilienceSettings {
                samples: 100,
                ..ResilienceSettings::default()
            }),
            seed,
            ..PipelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_c == 0 || self.top_c > self.batch {
            return Err(Error::Config(format!(
                "need 0 < c <= B, got c = {} and B = {}",
                self.top_c, self.batch
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("convergence tolerance must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.prior_fraction) {
            return Err(Error::Config("prior fraction must lie in [0, 1]".into()));
        }
        if self.dataset.size == 0 && self.dataset.path.is_none() {
            return Err(Error::Config("dataset size must be positive".into()));
        }
        if !(self.ascent_step_size >= 0.0) {
            return Err(Error::Config("ascent step size must be nonnegative".into()));
        }
        self.dataset.synth.validate()?;
        self.estimator.validate()?;
        self.generator.validate()?;
        if let Some(r) = &self.resilience {
            r.model.validate()?;
            if r.samples == 0 {
                return Err(Error::Config("resilience scoring needs at least one sample".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A scored candidate design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub graph: DesignGraph,
    pub estimated_q: f64,
    pub true_q: Option<f64>,
}

/// A selected design as stored in the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainedDesign {
    pub id: String,
    pub iteration: usize,
    pub rank: usize,
    pub estimated_q: f64,
    pub true_q: f64,
    pub graph: DesignGraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub q_target: f64,
    pub best_estimated_q: f64,
    pub best_true_q: f64,
    pub mean_topc_estimated_q: f64,
    /// Mean true metric of the selected designs.
    pub mean_topc_q: f64,
    pub blended_ids: Vec<String>,
    pub resamples: usize,
    pub estimator_train_mse: Option<f64>,
    pub estimator_val_mse: Option<f64>,
    pub generator_kl: Option<f64>,
    pub generator_dec: Option<f64>,
    pub generator_perf: Option<f64>,
    pub mean_topc_edns: Option<f64>,
    pub best_edns: Option<f64>,
}

/// Complete loop state; everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub graphs: Vec<DesignGraph>,
    pub labels: Vec<f64>,
    pub ids: Vec<String>,
    pub estimator: EstimatorModel,
    pub generator: GeneratorModel,
    pub incumbent: Option<Candidate>,
    pub records: Vec<IterationRecord>,
    /// Best initial training label; the first iteration is compared to it.
    pub baseline: f64,
}

/// Pretraining histories of both models.
#[derive(Clone, Debug, Default)]
pub struct Pretraining {
    pub estimator: crate::estimator::History,
    pub generator: crate::generator::GeneratorHistory,
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    v.sum::<f64>() / n as f64
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl Pipeline {
    /// Loads or generates the dataset and pretrains both models.
    pub fn initialize(config: PipelineConfig) -> Result<(Pipeline, Pretraining)> {
        config.validate()?;
        let data = match &config.dataset.path {
            Some(path) => {
                let file = fs::File::open(path)?;
                Dataset::read_jsonl(BufReader::new(file), config.dataset.synth.clone())?
            }
            None => build_dataset(config.dataset.size, &config.dataset.synth)?,
        };
        let labels = match config.label {
            LabelKind::MaxFlow if config.dataset.path.is_none() => data.labels.clone(),
            kind => data.graphs.par_iter().map(|g| kind.label(g)).collect::<Result<_>>()?,
        };
        let graphs = data.graphs;
        let ids = (0..graphs.len()).map(|i| format!("d{i}")).collect();
        let profile = graphs.first().map_or(SYNTHETIC_PROFILE.to_string(), |g| g.profile.clone());

        let estimator = EstimatorModel::new(
            config.estimator.clone(),
            &profile,
            config.objective,
            derive_seed(config.seed, stream::INIT, 0),
        )?;
        let est_cfg = TrainConfig {
            seed: derive_seed(config.seed, stream::SHUFFLE, 0),
            ..config.estimator_train.clone()
        };
        let (estimator, est_hist) = train_estimator(estimator, &graphs, &labels, &est_cfg)?;

        let generator = GeneratorModel::new(
            config.generator.clone(),
            &profile,
            config.objective,
            config.dataset.synth.clone(),
            derive_seed(config.seed, stream::INIT, 1),
        )?;
        let gen_cfg = GeneratorTrainConfig {
            seed: derive_seed(config.seed, stream::SHUFFLE, 1),
            ..config.generator_train.clone()
        };
        let (generator, gen_hist) = train_generator(generator, &graphs, &labels, &gen_cfg)?;

        let baseline = labels
            .iter()
            .copied()
            .min_by(|a: &f64, b: &f64| config.objective.key(*a).total_cmp(&config.objective.key(*b)))
            .ok_or_else(|| Error::Config("the dataset is empty".into()))?;
        Ok((
            Pipeline {
                baseline,
                config,
                graphs,
                labels,
                ids,
                estimator,
                generator,
                incumbent: None,
                records: Vec::new(),
            },
            Pretraining {
                estimator: est_hist,
                generator: gen_hist,
            },
        ))
    }

    pub fn iteration(&self) -> usize {
        self.records.len()
    }

    /// Training designs ordered best first; ties keep dataset order.
    fn ranked_training(&self) -> Vec<usize> {
        let obj = self.config.objective;
        let mut idx: Vec<usize> = (0..self.labels.len()).collect();
        idx.sort_by(|&a, &b| obj.key(self.labels[a]).total_cmp(&obj.key(self.labels[b])).then(a.cmp(&b)));
        idx
    }

    fn q_target(&self, best_label: f64) -> f64 {
        self.config.q_target.unwrap_or_else(|| match self.config.objective {
            Objective::Maximize => best_label + 0.1 * best_label.abs(),
            Objective::Minimize => best_label - 0.1 * best_label.abs(),
        })
    }

    /// One candidate slot: encode (or draw from the prior), ascend, decode and
    /// label, redrawing until the design is valid and its metric defined.
    fn draw_candidate(&self, slot: usize, source: Option<usize>, q_target: f64, iter_seed: u64) -> Result<(DesignGraph, f64, usize)> {
        let cfg = &self.config;
        let mut last = String::new();
        for attempt in 0..=cfg.max_resamples {
            let seed = derive_seed(iter_seed, slot as u64, attempt as u64);
            let (code, positions) = match source {
                Some(i) => (
                    encode(&self.generator, &self.graphs[i], seed)?,
                    Some(self.graphs[i].nodes.iter().map(|n| n.pos).collect()),
                ),
                None => (sample_prior(&self.generator, None, seed), None),
            };
            let code = if cfg.ascent_steps > 0 {
                latent_ascent(&self.generator, &code, q_target, cfg.ascent_steps, cfg.ascent_step_size)?.code
            } else {
                code
            };
            let opts = DecodeOptions {
                positions,
                ..DecodeOptions::new(DecodeMode::Greedy, seed)
            };
            let graph = match decode(&self.generator, &code, &opts) {
                Ok(g) => g,
                Err(Error::DecodeRunaway(n)) => {
                    last = format!("decode exceeded {n} steps");
                    continue;
                }
                Err(e) => return Err(e),
            };
            if let Some(v) = validate(&graph).first() {
                last = format!("{v:?}");
                continue;
            }
            match cfg.label.label(&graph) {
                Ok(q) => return Ok((graph, q, attempt)),
                Err(e @ (Error::DegenerateNetwork(_) | Error::UndefinedMetric(_))) => last = e.to_string(),
                Err(e) => return Err(e),
            }
        }
        Err(Error::Config(format!(
            "candidate {slot} found no valid design in {} draws; last problem: {last}",
            cfg.max_resamples + 1
        )))
    }

    /// Runs one generate, select, blend and retrain round.
    pub fn run_iteration(&mut self) -> Result<(IterationRecord, Vec<RetainedDesign>)> {
        let t = self.iteration() + 1;
        self.step(t).map_err(|e| match e {
            e @ Error::Iteration { .. } => e,
            e => Error::Iteration {
                iteration: t,
                detail: e.to_string(),
            },
        })
    }

    fn step(&mut self, t: usize) -> Result<(IterationRecord, Vec<RetainedDesign>)> {
        let cfg = self.config.clone();
        let obj = cfg.objective;
        let iter_seed = derive_seed(cfg.seed, stream::CANDIDATE, t as u64);
        let ranked = self.ranked_training();
        let q_target = self.q_target(self.labels[ranked[0]]);
        let sources = &ranked[..cfg.top_c.min(ranked.len())];
        let from_prior = (cfg.prior_fraction * cfg.batch as f64).round() as usize;

        let drawn = (0..cfg.batch)
            .into_par_iter()
            .map(|k| {
                let source = (k >= from_prior).then(|| sources[(k - from_prior) % sources.len()]);
                self.draw_candidate(k, source, q_target, iter_seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let resamples = drawn.iter().map(|d| d.2).sum();
        let graphs: Vec<DesignGraph> = drawn.iter().map(|d| d.0.clone()).collect();
        let scores = estimate_batch(&self.estimator, &graphs)?;

        let mut pool: Vec<Candidate> = Vec::with_capacity(cfg.batch + 1);
        if cfg.elitism {
            if let Some(inc) = &self.incumbent {
                let estimated_q = estimate_batch(&self.estimator, std::slice::from_ref(&inc.graph))?[0];
                pool.push(Candidate {
                    estimated_q,
                    ..inc.clone()
                });
            }
        }
        let elite_in_pool = !pool.is_empty();
        for (k, ((graph, q, _), s)) in drawn.into_iter().zip(scores).enumerate() {
            pool.push(Candidate {
                id: format!("i{t}-c{k}"),
                graph,
                estimated_q: s,
                true_q: Some(q),
            });
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&a, &b| {
            obj.key(pool[a].estimated_q)
                .total_cmp(&obj.key(pool[b].estimated_q))
                .then(a.cmp(&b))
        });
        let selected: Vec<Candidate> = order[..cfg.top_c].iter().map(|&i| pool[i].clone()).collect();
        let true_q = |c: &Candidate| c.true_q.expect("candidates carry true labels");

        // Blend: new designs replace the worst-labeled training designs.
        let fresh: Vec<&Candidate> = selected
            .iter()
            .filter(|c| !(elite_in_pool && Some(&c.id) == self.incumbent.as_ref().map(|i| &i.id)))
            .collect();
        let worst: Vec<usize> = ranked.iter().rev().take(fresh.len()).copied().collect();
        for (&slot, c) in worst.iter().zip(&fresh) {
            self.graphs[slot] = c.graph.clone();
            self.labels[slot] = true_q(c);
            self.ids[slot] = c.id.clone();
        }
        let blended_ids: Vec<String> = fresh.iter().map(|c| c.id.clone()).collect();
        self.incumbent = Some(selected[0].clone());

        let (edns_values, best_edns) = match &cfg.resilience {
            Some(r) => {
                let values = selected
                    .iter()
                    .map(|c| edns(&c.graph, &r.model, r.samples, r.seed).map(|e| e.edns))
                    .collect::<Result<Vec<_>>>()?;
                let best = values[0];
                (Some(mean(values.into_iter())), Some(best))
            }
            None => (None, None),
        };

        // Fine-tuning.
        let mut record = IterationRecord {
            iteration: t,
            q_target,
            best_estimated_q: selected[0].estimated_q,
            best_true_q: true_q(&selected[0]),
            mean_topc_estimated_q: mean(selected.iter().map(|c| c.estimated_q)),
            mean_topc_q: mean(selected.iter().map(true_q)),
            blended_ids,
            resamples,
            estimator_train_mse: None,
            estimator_val_mse: None,
            generator_kl: None,
            generator_dec: None,
            generator_perf: None,
            mean_topc_edns: edns_values,
            best_edns,
        };
        if cfg.retrain.generator_epochs > 0 {
            let mut chosen: Vec<usize> = match cfg.retrain.generator_pick {
                FinetunePick::Best => {
                    let mut ranked = self.ranked_training();
                    ranked.truncate(cfg.retrain.generator_sample);
                    ranked
                }
                FinetunePick::Random => {
                    let mut chosen = worst.clone();
                    let rest: Vec<usize> = (0..self.graphs.len()).filter(|i| !worst.contains(i)).collect();
                    let extra = cfg.retrain.generator_sample.saturating_sub(chosen.len()).min(rest.len());
                    let mut rng = derived_rng(cfg.seed, stream::FINETUNE, t as u64);
                    chosen.extend(sample(&mut rng, rest.len(), extra).into_iter().map(|i| rest[i]));
                    chosen
                }
            };
            chosen.sort_unstable();
            if !chosen.is_empty() {
                let g: Vec<DesignGraph> = chosen.iter().map(|&i| self.graphs[i].clone()).collect();
                let l: Vec<f64> = chosen.iter().map(|&i| self.labels[i]).collect();
                let tc = GeneratorTrainConfig {
                    epochs: cfg.retrain.generator_epochs,
                    rule: cfg.retrain.generator_rule.unwrap_or(cfg.generator_train.rule),
                    fit_scaler: false,
                    seed: derive_seed(cfg.seed, stream::FINETUNE, 2 * t as u64),
                    ..cfg.generator_train.clone()
                };
                let (generator, hist) = train_generator(self.generator.clone(), &g, &l, &tc)?;
                self.generator = generator;
                if let Some(last) = hist.records.last() {
                    record.generator_kl = Some(last.kl);
                    record.generator_dec = Some(last.dec);
                    record.generator_perf = Some(last.perf);
                }
            }
        }
        if cfg.retrain.finetune_estimator && cfg.retrain.estimator_epochs > 0 {
            let tc = TrainConfig {
                epochs: cfg.retrain.estimator_epochs,
                rule: cfg.retrain.estimator_rule.unwrap_or(cfg.estimator_train.rule),
                fit_scaler: false,
                seed: derive_seed(cfg.seed, stream::FINETUNE, 2 * t as u64 + 1),
                ..cfg.estimator_train.clone()
            };
            let (estimator, hist) = train_estimator(self.estimator.clone(), &self.graphs, &self.labels, &tc)?;
            self.estimator = estimator;
            if let Some(last) = hist.records.last() {
                record.estimator_train_mse = finite(last.train_mse);
                record.estimator_val_mse = finite(last.val_mse);
            }
        }

        let retained = selected
            .iter()
            .enumerate()
            .map(|(rank, c)| RetainedDesign {
                id: c.id.clone(),
                iteration: t,
                rank,
                estimated_q: c.estimated_q,
                true_q: true_q(c),
                graph: c.graph.clone(),
            })
            .collect();
        self.records.push(record.clone());
        Ok((record, retained))
    }

    /// True once the loop should stop after the latest iteration.
    pub fn finished(&self) -> bool {
        let t = self.iteration();
        if t >= self.config.max_iterations {
            return true;
        }
        if t < self.config.min_iterations.max(1) {
            return false;
        }
        let best = self.records[t - 1].best_estimated_q;
        let previous = match t {
            1 => self.baseline,
            _ => self.records[t - 2].best_estimated_q,
        };
        (best - previous).abs() < self.config.tolerance
    }
}

/// Files inside a run directory.
pub mod layout {
    pub const CONFIG: &str = "config.json";
    pub const STATE: &str = "state.json";
    pub const DATASET: &str = "dataset.jsonl";
    pub const ESTIMATOR: &str = "checkpoints/estimator.ckpt";
    pub const GENERATOR: &str = "checkpoints/generator.ckpt";
    pub const ESTIMATOR_HISTORY: &str = "estimator_history.csv";
    pub const GENERATOR_HISTORY: &str = "generator_history.csv";
    pub const RECORDS_CSV: &str = "records.csv";
    pub const RECORDS_JSON: &str = "records.json";
    pub const DESIGNS_DIR: &str = "designs";
    pub const BEST: &str = "best_design.json";
    pub const REPORT: &str = "report.json";
    pub const ERROR: &str = "error.json";
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    baseline: f64,
    ids: Vec<String>,
    incumbent: Option<Candidate>,
    records: Vec<IterationRecord>,
}

/// Summary of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub converged: bool,
    pub records: Vec<IterationRecord>,
    pub best: Option<Candidate>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
}

impl Pipeline {
    /// Writes everything needed to continue the run from `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        write_json(&dir.join(layout::CONFIG), &self.config)?;
        crate::graph::write_jsonl(
            BufWriter::new(fs::File::create(dir.join(layout::DATASET))?),
            &self.graphs,
            Some(&self.labels),
        )?;
        self.estimator.save(BufWriter::new(fs::File::create(dir.join(layout::ESTIMATOR))?))?;
        self.generator.save(BufWriter::new(fs::File::create(dir.join(layout::GENERATOR))?))?;
        write_json(
            &dir.join(layout::STATE),
            &SavedState {
                baseline: self.baseline,
                ids: self.ids.clone(),
                incumbent: self.incumbent.clone(),
                records: self.records.clone(),
            },
        )?;
        write_json(&dir.join(layout::RECORDS_JSON), &self.records)?;
        write_records_csv(fs::File::create(dir.join(layout::RECORDS_CSV))?, &self.records)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Pipeline> {
        let config: PipelineConfig = read_json(&dir.join(layout::CONFIG))?;
        config.validate()?;
        let state: SavedState = read_json(&dir.join(layout::STATE))?;
        let rows = crate::graph::read_jsonl(BufReader::new(fs::File::open(dir.join(layout::DATASET))?))?;
        let mut graphs = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for (i, (g, l)) in rows.into_iter().enumerate() {
            graphs.push(g);
            labels.push(l.ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "missing `label`".into(),
            })?);
        }
        if state.ids.len() != graphs.len() {
            return Err(Error::Config("saved state and dataset disagree in size".into()));
        }
        let estimator = EstimatorModel::load(BufReader::new(fs::File::open(dir.join(layout::ESTIMATOR))?))?;
        let generator = GeneratorModel::load(BufReader::new(fs::File::open(dir.join(layout::GENERATOR))?))?;
        Ok(Pipeline {
            baseline: state.baseline,
            config,
            graphs,
            labels,
            ids: state.ids,
            estimator,
            generator,
            incumbent: state.incumbent,
            records: state.records,
        })
    }
}

fn record_error(dir: &Path, err: &Error) {
    let iteration = match err {
        Error::Iteration { iteration, .. } => Some(*iteration),
        _ => None,
    };
    let body = serde_json::json!({ "error": err.kind(), "iteration": iteration, "message": err.to_string() });
    let _ = fs::write(dir.join(layout::ERROR), body.to_string());
}

fn iterate(mut pipe: Pipeline, dir: &Path) -> Result<RunSummary> {
    let designs = dir.join(layout::DESIGNS_DIR);
    fs::create_dir_all(&designs)?;
    while pipe.iteration() == 0 || !pipe.finished() {
        let (record, retained) = pipe.run_iteration()?;
        let file = BufWriter::new(fs::File::create(designs.join(format!("iter_{:03}.jsonl", record.iteration)))?);
        report::write_retained(file, &retained)?;
        pipe.save(dir)?;
    }
    if let Some(best) = &pipe.incumbent {
        write_json(&dir.join(layout::BEST), best)?;
    }
    let converged = pipe.iteration() < pipe.config.max_iterations;
    emit_report(dir)?;
    Ok(RunSummary {
        iterations: pipe.iteration(),
        converged,
        records: pipe.records,
        best: pipe.incumbent,
    })
}

/// Pretrains, iterates to convergence or the iteration cap and writes the
/// run directory. A failure is also written to `error.json`; the directory
/// then holds the state after the last completed iteration.
pub fn run_pipeline(config: PipelineConfig, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    let result = (|| {
        let (pipe, pre) = Pipeline::initialize(config)?;
        pre.estimator.write_csv(fs::File::create(dir.join(layout::ESTIMATOR_HISTORY))?)?;
        pre.generator.write_csv(fs::File::create(dir.join(layout::GENERATOR_HISTORY))?)?;
        pipe.save(dir)?;
        iterate(pipe, dir)
    })();
    if let Err(e) = &result {
        record_error(dir, e);
    }
    result
}

/// Continues a run directory written by [`run_pipeline`].
pub fn resume_pipeline(dir: &Path) -> Result<RunSummary> {
    let result = Pipeline::load(dir).and_then(|pipe| {
        let _ = fs::remove_file(dir.join(layout::ERROR));
        iterate(pipe, dir)
    });
    if let Err(e) = &result {
        record_error(dir, e);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(seed: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig::desk(seed);
        cfg.dataset.size = 24;
        cfg.dataset.synth.n = 10;
        cfg.batch = 6;
        cfg.top_c = 2;
        cfg.max_iterations = 2;
        cfg.min_iterations = 2;
        cfg.estimator_train.epochs = 3;
        cfg.generator_train.epochs = 1;
        cfg.generator.latent_dim = 4;
        cfg.generator.hidden = 8;
        cfg.generator.encoder_rounds = 2;
        cfg.ascent_steps = 3;
        cfg.retrain.generator_sample = 8;
        cfg.resilience = Some(ResilienceSettings {
            samples: 10,
            ..ResilienceSettings::default()
        });
        cfg
    }

    #[test]
    fn config_invariants() {
        let mut cfg = PipelineConfig::desk(0);
        assert!(cfg.validate().is_ok());
        cfg.top_c = cfg.batch + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::desk(0);
        cfg.max_iterations = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::desk(0);
        cfg.tolerance = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_with_infinite_tolerance() {
        let mut cfg = PipelineConfig::desk(3);
        cfg.tolerance = f64::INFINITY;
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn dataset_size_is_constant_and_blends_are_true_labels() {
        let (mut pipe, _) = Pipeline::initialize(tiny(1)).unwrap();
        let size = pipe.graphs.len();
        let (record, retained) = pipe.run_iteration().unwrap();
        assert_eq!(pipe.graphs.len(), size);
        assert_eq!(retained.len(), 2);
        for id in &record.blended_ids {
            let slot = pipe.ids.iter().position(|x| x == id).unwrap();
            assert_eq!(pipe.labels[slot], LabelKind::MaxFlow.label(&pipe.graphs[slot]).unwrap());
        }
    }

    #[test]
    fn infinite_tolerance_stops_after_one_iteration() {
        let mut cfg = tiny(2);
        cfg.tolerance = f64::INFINITY;
        cfg.min_iterations = 1;
        cfg.max_iterations = 5;
        let dir = tempfile::tempdir().unwrap();
        let summary = run_pipeline(cfg, dir.path()).unwrap();
        assert_eq!(summary.iterations, 1);
        assert!(summary.converged);
    }
}
