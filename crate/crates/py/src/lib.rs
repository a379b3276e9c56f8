//! Python bindings: configs, pipeline stages and the scoring primitives.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use biaswap_core::bias_partition::{self, BiasScoreRecord};
use biaswap_core::cam_sampler::{self, ImportanceMap};
use biaswap_core::classifiers;
use biaswap_core::debias_pipeline::{self as dp, report, Ablation, StageOutcome};
use biaswap_core::Error;

fn value_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Flat `key = value` pipeline configuration.
#[pyclass(name = "Config", module = "biaswap", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: dp::PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self { inner: dp::PipelineConfig::default() }
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        dp::PipelineConfig::parse(text).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dp::PipelineConfig::load(&path).map(|inner| Self { inner }).map_err(value_err)
    }

    fn get(&self, key: &str) -> String {
        self.inner.get(key).to_string()
    }

    /// Returns a copy with `key` changed; the result is validated.
    fn set(&self, key: &str, value: &str) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.set(key, value).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { inner: self.inner.clone().with_seed(seed) }
    }

    /// `"c1"` or `"c2"`.
    fn with_ablation(&self, name: &str) -> PyResult<Self> {
        let a: Ablation = name.parse().map_err(value_err)?;
        Ok(Self { inner: self.inner.clone().with_ablation(a) })
    }

    fn with_oracle_swap(&self, on: bool) -> Self {
        Self { inner: self.inner.clone().with_oracle_swap(on) }
    }

    fn ablation_tag(&self) -> String {
        self.inner.ablation_tag()
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// One configured run under `root/<config hash>/`.
#[pyclass(name = "Pipeline", module = "biaswap")]
struct PyPipeline {
    inner: dp::Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config, root=None))]
    fn new(config: PyConfig, root: Option<PathBuf>) -> Self {
        let root = root.unwrap_or_else(dp::Pipeline::default_root);
        Self { inner: dp::Pipeline::new(config.inner, &root) }
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.inner.run_dir.clone()
    }

    fn stage_dir(&self, stage: &str) -> PyResult<PathBuf> {
        Ok(self.inner.stage_dir(stage.parse().map_err(value_err)?))
    }

    /// Runs one stage; returns `"ran"` or `"up_to_date"`.
    #[pyo3(signature = (stage, force=false))]
    fn run_stage(&self, py: Python<'_>, stage: &str, force: bool) -> PyResult<&'static str> {
        let s: dp::Stage = stage.parse().map_err(value_err)?;
        let out = py.detach(|| self.inner.run_stage(s, force)).map_err(|e| runtime_err(dp::stage_error(s, e)))?;
        Ok(match out {
            StageOutcome::Ran => "ran",
            StageOutcome::UpToDate => "up_to_date",
        })
    }

    #[pyo3(signature = (force=false))]
    fn run_all(&self, py: Python<'_>, force: bool) -> PyResult<()> {
        py.detach(|| self.inner.run_all(force)).map_err(runtime_err)
    }

    fn is_complete(&self, stage: &str) -> PyResult<bool> {
        Ok(self.inner.is_complete(stage.parse().map_err(value_err)?))
    }

    /// The evaluate stage's report, wrapped like `report.json`.
    fn metrics_json(&self) -> PyResult<String> {
        let m = self.inner.metrics().map_err(runtime_err)?;
        let file = serde_json::json!({ "schema_version": report::SCHEMA_VERSION, "reports": [m] });
        Ok(file.to_string())
    }
}

/// `(score, correct, max_prob)` for one logit vector.
#[pyfunction]
fn bias_score(logits: Vec<f64>, target: usize) -> PyResult<(f64, bool, f64)> {
    let r = bias_partition::bias_score("py", &logits, target).map_err(value_err)?;
    Ok((r.score, r.correct, r.max_prob))
}

/// Mean threshold and the 0/1 pseudo label of every score, in input order.
#[pyfunction]
fn assign_pseudo_labels(scores: Vec<f64>) -> PyResult<(f64, Vec<u32>)> {
    let records: Vec<BiasScoreRecord> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| BiasScoreRecord { example_id: i.to_string(), score: *s, correct: false, max_prob: 1.0 - s })
        .collect();
    let p = bias_partition::assign_pseudo_labels(&records).map_err(value_err)?;
    let labels = (0..scores.len()).map(|i| p.label(&i.to_string()).unwrap_or(0) as u32).collect();
    Ok((p.threshold, labels))
}

/// Softmax of a row-major `height × width` map at temperature `tau`.
#[pyfunction]
#[pyo3(signature = (values, height, width, tau=cam_sampler::DEFAULT_TEMPERATURE))]
fn sampling_distribution(values: Vec<f64>, height: usize, width: usize, tau: f64) -> PyResult<Vec<f64>> {
    if values.len() != height * width {
        return Err(PyValueError::new_err(format!("{} values for a {height}x{width} map", values.len())));
    }
    let map = ImportanceMap { height, width, values, class_index: 0, source_example_id: "py".into() };
    Ok(cam_sampler::to_sampling_distribution(&map, tau).map_err(value_err)?.probabilities)
}

/// Relative deviation between the GCE gradient and the scaled CE gradient.
#[pyfunction]
fn gce_gradient_check(logits: Vec<f32>, target: usize, q: f32) -> PyResult<f64> {
    classifiers::gce_gradient_check(&logits, target, q).map_err(value_err)
}

/// JSON Schema of `report.json`.
#[pyfunction]
fn report_schema() -> &'static str {
    report::SCHEMA
}

#[pyfunction]
fn stages() -> Vec<&'static str> {
    dp::Stage::ALL.iter().map(|s| s.name()).collect()
}

#[pymodule]
fn biaswap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(bias_score, m)?)?;
    m.add_function(wrap_pyfunction!(assign_pseudo_labels, m)?)?;
    m.add_function(wrap_pyfunction!(sampling_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(gce_gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(report_schema, m)?)?;
    m.add_function(wrap_pyfunction!(stages, m)?)?;
    m.add("RUN_ROOT_ENV", dp::RUN_ROOT_ENV)?;
    Ok(())
}
