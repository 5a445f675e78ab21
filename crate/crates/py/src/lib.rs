//! Python module `resgen`: designs, flow metrics, disruption simulation,
//! the estimator and generator, and the optimization loop.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use resgen_core::estimator::{estimate, train_estimator, EstimatorModel, EstimatorSpec, TrainConfig};
use resgen_core::flow::{evaluate, LabelWeights, Objective};
use resgen_core::generator::{
    decode, sample_prior, train_generator, DecodeMode, DecodeOptions, GeneratorConfig, GeneratorModel,
    GeneratorTrainConfig,
};
use resgen_core::graph::{self, DesignGraph, Profile, SYNTHETIC_PROFILE};
use resgen_core::pipeline::{run_pipeline, PipelineConfig};
use resgen_core::resilience::{self, DisruptionModel, PerformanceCurve};
use resgen_core::synth::{build_dataset, SynthConfig};
use resgen_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(format!("{}: {e}", e.kind())),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for resgen_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// A network design.
#[pyclass(name = "Design", from_py_object)]
#[derive(Clone)]
pub struct PyDesign {
    inner: DesignGraph,
}

#[pymethods]
impl PyDesign {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyDesign {
            inner: graph::deserialize(text).py()?,
        })
    }

    fn to_json(&self) -> String {
        graph::serialize(&self.inner)
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    /// Descriptions of every broken invariant; empty when valid.
    fn validate(&self) -> Vec<String> {
        graph::validate(&self.inner).iter().map(|v| format!("{v:?}")).collect()
    }

    /// Flow metrics as a JSON object string.
    #[pyo3(signature = (alpha=0.5, k=100.0, a=1.0))]
    fn metrics(&self, alpha: f64, k: f64, a: f64) -> PyResult<String> {
        let m = evaluate(&self.inner, LabelWeights { alpha, k, a }).py()?;
        serde_json::to_string(&m).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Maximum deliverable flow; zero without a supply or demand node.
    fn max_flow(&self) -> PyResult<f64> {
        resilience::nominal_demand(&self.inner).py()
    }

    /// Monte Carlo expected demand not supplied: `(mean, standard error)`.
    #[pyo3(signature = (samples=200, grid=8, p0=0.9, gamma=0.5, seed=0))]
    fn edns(&self, samples: usize, grid: usize, p0: f64, gamma: f64, seed: u64) -> PyResult<(f64, f64)> {
        let model = DisruptionModel {
            grid,
            p0,
            gamma,
            ..DisruptionModel::default()
        };
        let e = resilience::edns(&self.inner, &model, samples, seed).py()?;
        Ok((e.edns, e.stderr))
    }

    fn __repr__(&self) -> String {
        format!(
            "Design(nodes={}, edges={})",
            self.inner.node_count(),
            self.inner.edge_count()
        )
    }
}

/// Labeled synthetic designs: `(designs, labels)`.
#[pyfunction]
#[pyo3(signature = (count, n=33, k=2, seed=0))]
fn generate_dataset(count: usize, n: usize, k: usize, seed: u64) -> PyResult<(Vec<PyDesign>, Vec<f64>)> {
    let cfg = SynthConfig {
        n,
        k,
        seed,
        ..SynthConfig::default()
    };
    let data = build_dataset(count, &cfg).py()?;
    Ok((
        data.graphs.into_iter().map(|inner| PyDesign { inner }).collect(),
        data.labels,
    ))
}

/// Area under a resilience curve over the area under the nominal curve.
#[pyfunction]
fn resilience_ratio(times: Vec<f64>, resilience: Vec<f64>, nominal: Vec<f64>) -> PyResult<f64> {
    let r = PerformanceCurve::new(times.clone(), resilience).py()?;
    let n = PerformanceCurve::new(times, nominal).py()?;
    resgen_core::resilience::resilience_ratio(&r, &n).py()
}

fn unwrap_designs(designs: &[PyDesign]) -> Vec<DesignGraph> {
    designs.iter().map(|d| d.inner.clone()).collect()
}

#[pyclass(name = "Estimator")]
pub struct PyEstimator {
    inner: EstimatorModel,
}

#[pymethods]
impl PyEstimator {
    /// Trains the default estimator; returns the model and its per-epoch
    /// `(train_mse, val_mse)` history.
    #[staticmethod]
    #[pyo3(signature = (designs, labels, epochs=60, seed=0))]
    fn train(designs: Vec<PyDesign>, labels: Vec<f64>, epochs: usize, seed: u64) -> PyResult<(Self, Vec<(f64, f64)>)> {
        let f = Profile::synthetic().feature_count();
        let model = EstimatorModel::new(EstimatorSpec::default_for(f), SYNTHETIC_PROFILE, Objective::Maximize, seed).py()?;
        let cfg = TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let (inner, hist) = train_estimator(model, &unwrap_designs(&designs), &labels, &cfg).py()?;
        let losses = hist.records.iter().map(|r| (r.train_mse, r.val_mse)).collect();
        Ok((PyEstimator { inner }, losses))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let file = fs::File::open(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(PyEstimator {
            inner: EstimatorModel::load(BufReader::new(file)).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let file = fs::File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        self.inner.save(BufWriter::new(file)).py()
    }

    fn estimate(&self, design: &PyDesign) -> PyResult<f64> {
        estimate(&self.inner, &design.inner).py()
    }
}

#[pyclass(name = "Generator")]
pub struct PyGenerator {
    inner: GeneratorModel,
}

#[pymethods]
impl PyGenerator {
    /// Trains a generator; returns the model and its per-epoch mean total loss.
    #[staticmethod]
    #[pyo3(signature = (designs, labels, epochs=5, latent_dim=8, hidden=16, seed=0))]
    fn train(
        designs: Vec<PyDesign>,
        labels: Vec<f64>,
        epochs: usize,
        latent_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> PyResult<(Self, Vec<f64>)> {
        let cfg = GeneratorConfig {
            latent_dim,
            hidden,
            ..GeneratorConfig::default()
        };
        let model = GeneratorModel::new(cfg, SYNTHETIC_PROFILE, Objective::Maximize, SynthConfig::default(), seed).py()?;
        let tc = GeneratorTrainConfig {
            epochs,
            seed,
            ..GeneratorTrainConfig::default()
        };
        let (inner, hist) = train_generator(model, &unwrap_designs(&designs), &labels, &tc).py()?;
        Ok((PyGenerator { inner }, hist.records.iter().map(|r| r.total).collect()))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let file = fs::File::open(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(PyGenerator {
            inner: GeneratorModel::load(BufReader::new(file)).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let file = fs::File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        self.inner.save(BufWriter::new(file)).py()
    }

    /// Greedy decodes of prior samples. A decode that hits the step guard
    /// is redrawn, up to `attempts` times per design; `max_steps` overrides
    /// the guard.
    #[pyo3(signature = (count, seed=0, nodes=None, attempts=10, max_steps=None))]
    fn sample(
        &self,
        count: usize,
        seed: u64,
        nodes: Option<usize>,
        attempts: u64,
        max_steps: Option<usize>,
    ) -> PyResult<Vec<PyDesign>> {
        (0..count as u64)
            .map(|k| {
                let mut last = None;
                for a in 0..attempts.max(1) {
                    let s = resgen_core::seed::derive_seed(seed, k, a);
                    let code = sample_prior(&self.inner, nodes, s);
                    let opts = DecodeOptions {
                        max_steps,
                        ..DecodeOptions::new(DecodeMode::Greedy, s)
                    };
                    match decode(&self.inner, &code, &opts) {
                        Ok(inner) => return Ok(PyDesign { inner }),
                        Err(e @ Error::DecodeRunaway(_)) => last = Some(e),
                        Err(e) => return Err(py_err(e)),
                    }
                }
                Err(py_err(last.expect("at least one attempt")))
            })
            .collect()
    }
}

/// Desk-scale pipeline configuration as JSON.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn desk_config(seed: u64) -> String {
    serde_json::to_string_pretty(&PipelineConfig::desk(seed)).expect("configs serialize")
}

/// Runs the optimization loop into `out_dir`; returns the run summary as JSON.
#[pyfunction]
fn optimize(py: Python<'_>, config_json: &str, out_dir: &str) -> PyResult<String> {
    let cfg = PipelineConfig::from_json(config_json).py()?;
    let dir = Path::new(out_dir).to_path_buf();
    let summary = py.detach(move || run_pipeline(cfg, &dir)).py()?;
    serde_json::to_string(&summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn resgen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDesign>()?;
    m.add_class::<PyEstimator>()?;
    m.add_class::<PyGenerator>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(resilience_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(desk_config, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    Ok(())
}
