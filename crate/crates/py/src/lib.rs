//! Python bindings: the pure math (quotas, mixtures, advantages, soft
//! value, diversity), configuration, and the pipeline stages.
//!
//! Structured results cross the boundary as JSON and are decoded with the
//! `json` module, so Python sees plain dicts and lists.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use dpe_core::agents::Modality;
use dpe_core::analysis::EmbeddingSet;
use dpe_core::capability::{parse_category, CapabilityCategory};
use dpe_core::config::{MixtureMode, RunConfig};
use dpe_core::diagnosis::{accuracy_to_mixture, CategoryStats, WeightBands};
use dpe_core::error::DpeError;
use dpe_core::grpo::GrpoConfig;
use dpe_core::pipeline::{Pipeline, Stage};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(dpe, PipelineError, PyException, "A pipeline stage failed; `args[1]` is the CLI exit code.");

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: DpeError) -> PyErr {
    PipelineError::new_err((e.to_string(), e.exit_code()))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn category(name: &str) -> PyResult<CapabilityCategory> {
    parse_category(name).map_err(value_err)
}

/// Category ids in canonical order.
#[pyfunction]
fn categories() -> Vec<&'static str> {
    CapabilityCategory::ALL.iter().map(|c| c.id()).collect()
}

/// Integer quotas summing to `budget` for a mixture given as {category: alpha}.
#[pyfunction]
fn allocate_counts(mixture: BTreeMap<String, f64>, budget: u64) -> PyResult<BTreeMap<String, u64>> {
    let mut w = [0.0; CapabilityCategory::COUNT];
    for (name, a) in &mixture {
        w[category(name)?.index()] = *a;
    }
    let counts = dpe_core::quota::allocate_counts(&w, budget).map_err(value_err)?;
    Ok(CapabilityCategory::ALL.iter().map(|c| (c.id().to_string(), counts[c.index()])).collect())
}

/// Mixture from per-category (correct, count) pairs under the default bands.
#[pyfunction]
fn mixture_from_counts(results: BTreeMap<String, (usize, usize)>) -> PyResult<BTreeMap<String, f64>> {
    let mut stats: Vec<CategoryStats> = CapabilityCategory::ALL
        .iter()
        .map(|&c| CategoryStats { category: c, count: 0, accuracy: None, error_ids: Vec::new() })
        .collect();
    for (name, (correct, count)) in results {
        if correct > count {
            return Err(value_err(format!("{name}: {correct} correct of {count}")));
        }
        let s = &mut stats[category(&name)?.index()];
        s.count = count;
        s.accuracy = (count > 0).then(|| correct as f64 / count as f64);
        s.error_ids = (0..count - correct).map(|i| format!("{name}-{i}")).collect();
    }
    let mix = accuracy_to_mixture(&stats, &WeightBands::default()).map_err(value_err)?;
    Ok(mix.weights().iter().map(|(c, a)| (c.id().to_string(), *a)).collect())
}

/// Group-normalized advantages (population std).
#[pyfunction]
#[pyo3(signature = (rewards, std_floor = 1e-8))]
fn group_advantages(rewards: Vec<f64>, std_floor: f64) -> PyResult<Vec<f64>> {
    dpe_core::grpo::group_advantages(&rewards, std_floor).map_err(value_err)
}

#[pyfunction]
fn tilted_optimal_policy(init: Vec<f64>, rewards: Vec<f64>, beta: f64) -> PyResult<Vec<f64>> {
    dpe_core::grpo::tilted_optimal_policy(&init, &rewards, beta).map_err(value_err)
}

/// Probability of the rewarded action after each GRPO step on a bandit.
#[pyfunction]
#[pyo3(signature = (vocab = 4, steps = 200, seed = 7))]
fn bandit_convergence(py: Python<'_>, vocab: usize, steps: usize, seed: u64) -> PyResult<Vec<f64>> {
    py.detach(|| dpe_core::grpo::bandit_convergence(vocab, steps, &GrpoConfig::default(), seed))
        .map(|t| t.p_correct)
        .map_err(value_err)
}

#[pyfunction]
fn soft_value(p: f64, beta: f64) -> PyResult<f64> {
    dpe_core::learnability::soft_value(p, beta).map_err(value_err)
}

#[pyfunction]
fn kl_exact(p: f64, beta: f64) -> PyResult<f64> {
    dpe_core::learnability::kl_exact(p, beta).map_err(value_err)
}

#[pyfunction]
fn kl_lower_bound(p: f64, beta: f64) -> PyResult<f64> {
    dpe_core::learnability::kl_lower_bound(p, beta).map_err(value_err)
}

/// Mean pairwise cosine distance of the rows.
#[pyfunction]
fn diversity(vectors: Vec<Vec<f64>>) -> PyResult<f64> {
    let ids = (0..vectors.len()).map(|i| i.to_string()).collect();
    let set = EmbeddingSet::new(ids, vectors, Modality::Text).map_err(value_err)?;
    dpe_core::analysis::diversity(&set).map_err(value_err)
}

/// Run configuration. Built from defaults, a TOML string or a file, with
/// `DPE__SECTION__KEY` environment overrides applied by `load`.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => RunConfig::from_toml_with(t, std::iter::empty::<(String, String)>()).map_err(value_err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path = None))]
    fn load(path: Option<PathBuf>) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(path.as_deref()).map_err(value_err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn workspace(&self) -> PathBuf {
        self.inner.run.workspace.clone()
    }

    #[setter]
    fn set_workspace(&mut self, v: PathBuf) {
        self.inner.run.workspace = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.run.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.run.seed = v;
    }

    #[getter]
    fn iterations(&self) -> u32 {
        self.inner.run.iterations
    }

    #[setter]
    fn set_iterations(&mut self, v: u32) {
        self.inner.run.iterations = v;
    }

    #[getter]
    fn budget(&self) -> u64 {
        self.inner.generation.budget
    }

    #[setter]
    fn set_budget(&mut self, v: u64) {
        self.inner.generation.budget = v;
    }

    #[getter]
    fn mock(&self) -> bool {
        self.inner.run.mock
    }

    #[setter]
    fn set_mock(&mut self, v: bool) {
        self.inner.run.mock = v;
    }

    /// "guided" or "uniform".
    #[getter]
    fn mixture(&self) -> &'static str {
        match self.inner.generation.mixture {
            MixtureMode::Guided => "guided",
            MixtureMode::Uniform => "uniform",
        }
    }

    #[setter]
    fn set_mixture(&mut self, v: &str) -> PyResult<()> {
        self.inner.generation.mixture = match v {
            "guided" => MixtureMode::Guided,
            "uniform" => MixtureMode::Uniform,
            other => return Err(value_err(format!("unknown mixture mode {other:?}"))),
        };
        Ok(())
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(workspace={:?}, seed={}, mock={})", self.inner.run.workspace, self.inner.run.seed, self.inner.run.mock)
    }
}

fn parse_stage(name: &str) -> PyResult<Stage> {
    Ok(match name {
        "diagnose" => Stage::Diagnose,
        "generate" => Stage::Generate,
        "filter" => Stage::Filter,
        "train" => Stage::Train,
        other => return Err(value_err(format!("unknown stage {other:?}"))),
    })
}

/// The loop over one workspace. Each call builds fresh clients from the
/// configuration and resumes from the artifacts on disk.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    config: RunConfig,
    force: bool,
}

impl PyPipeline {
    fn build(&self) -> Result<Pipeline, DpeError> {
        Ok(Pipeline::from_config(self.config.clone())?.with_force(self.force))
    }
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config, force = false))]
    fn new(config: PyRunConfig, force: bool) -> PyResult<Self> {
        config.inner.validate().map_err(value_err)?;
        Ok(Self { config: config.inner, force })
    }

    /// Run one stage of iteration `k`; returns the artifact path.
    #[pyo3(signature = (stage, k = 0))]
    fn run_stage(&self, py: Python<'_>, stage: &str, k: u32) -> PyResult<PathBuf> {
        let stage = parse_stage(stage)?;
        py.detach(|| self.build()?.run_stage(stage, k)).map_err(pipeline_err)
    }

    /// Run every iteration; returns the summary as a dict.
    fn evolve<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let summary = py.detach(|| self.build()?.evolve()).map_err(pipeline_err)?;
        to_py(py, &summary)
    }

    #[pyo3(signature = (k = 0, modality = "text"))]
    fn diversity<'py>(&self, py: Python<'py>, k: u32, modality: &str) -> PyResult<Bound<'py, PyAny>> {
        let m = match modality {
            "text" => Modality::Text,
            "image" => Modality::Image,
            other => return Err(value_err(format!("unknown modality {other:?}"))),
        };
        let report = py.detach(|| self.build()?.run_diversity(k, m)).map_err(pipeline_err)?;
        to_py(py, &report)
    }

    #[pyo3(signature = (k = 0))]
    fn quality<'py>(&self, py: Python<'py>, k: u32) -> PyResult<Bound<'py, PyAny>> {
        let report = py.detach(|| self.build()?.run_quality(k)).map_err(pipeline_err)?;
        to_py(py, &report)
    }

    #[getter]
    fn workspace(&self) -> PathBuf {
        self.config.run.workspace.clone()
    }
}

/// Paired guided-versus-uniform run on the synthetic world.
#[pyfunction]
#[pyo3(signature = (config, force = false))]
fn simulate<'py>(py: Python<'py>, config: PyRunConfig, force: bool) -> PyResult<Bound<'py, PyAny>> {
    let report = py.detach(|| dpe_core::pipeline::simulate(&config.inner, force, Arc::new(|_| {}))).map_err(pipeline_err)?;
    to_py(py, &report)
}

#[pymodule]
fn dpe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PipelineError", m.py().get_type::<PipelineError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(categories, m)?)?;
    m.add_function(wrap_pyfunction!(allocate_counts, m)?)?;
    m.add_function(wrap_pyfunction!(mixture_from_counts, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(tilted_optimal_policy, m)?)?;
    m.add_function(wrap_pyfunction!(bandit_convergence, m)?)?;
    m.add_function(wrap_pyfunction!(soft_value, m)?)?;
    m.add_function(wrap_pyfunction!(kl_exact, m)?)?;
    m.add_function(wrap_pyfunction!(kl_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
