//! Python bindings for `coldrec`.
//!
//! Plain data crosses the boundary as lists and floats; nested results
//! (recommendations, evaluation reports) come back as Python dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use coldrec::completion::{complete as complete_matrix, CompletionConfig, CompletionMethod};
use coldrec::eval::{regret as regret_of, relevant_items as relevant_of, rr_at_k as rr_of};
use coldrec::protocol::{run_nested_cv, sparsify as sparsify_matrix, CVConfig};
use coldrec::recommend::hybrid_recommend;
use coldrec::stability::{detect_staggering as detect, Profile, StaggerConfig};
use coldrec::synth::{generate_synthetic, SynthConfig};
use coldrec::{CaseFeatures, DistanceMetric, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn py_to<T: serde::de::DeserializeOwned>(obj: Option<&Bound<'_, PyDict>>) -> PyResult<Option<T>> {
    let Some(obj) = obj else { return Ok(None) };
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Items × cases matrix; `None` marks a missing entry.
#[pyclass(name = "PerformanceMatrix", from_py_object)]
#[derive(Clone)]
struct PyMatrix {
    inner: coldrec::PerformanceMatrix,
}

#[pymethods]
impl PyMatrix {
    #[new]
    fn new(item_ids: Vec<String>, case_ids: Vec<String>, rows: Vec<Vec<Option<f64>>>) -> PyResult<Self> {
        coldrec::PerformanceMatrix::new(item_ids, case_ids, rows)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[getter]
    fn item_ids(&self) -> Vec<String> {
        self.inner.item_ids().to_vec()
    }

    #[getter]
    fn case_ids(&self) -> Vec<String> {
        self.inner.case_ids().to_vec()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.n_items(), self.inner.n_cases())
    }

    fn get(&self, item: &str, case: &str) -> PyResult<Option<f64>> {
        let i = self.inner.item_index(item).ok_or_else(|| to_py(Error::UnknownItem(item.into())))?;
        let j = self.inner.case_index(case).ok_or_else(|| to_py(Error::UnknownCase(case.into())))?;
        Ok(self.inner.get(i, j))
    }

    fn to_rows(&self) -> Vec<Vec<Option<f64>>> {
        self.inner.rows().to_vec()
    }

    fn observed_count(&self) -> usize {
        self.inner.observed_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "PerformanceMatrix({} items × {} cases, {} observed)",
            self.inner.n_items(),
            self.inner.n_cases(),
            self.inner.observed_count()
        )
    }
}

/// Matrix plus case features, experiments and reference item.
#[pyclass(name = "Bundle")]
struct PyBundle {
    inner: coldrec::io::DatasetBundle,
}

#[pymethods]
impl PyBundle {
    #[getter]
    fn matrix(&self) -> PyMatrix {
        PyMatrix {
            inner: self.inner.matrix.clone(),
        }
    }

    #[getter]
    fn experiment_ids(&self) -> Vec<String> {
        self.inner.experiments.experiment_ids().to_vec()
    }

    #[getter]
    fn reference_item(&self) -> Option<String> {
        self.inner.reference_item.clone()
    }

    fn cases_of(&self, experiment: &str) -> Vec<String> {
        self.inner.experiments.cases_of(experiment).into_iter().map(String::from).collect()
    }

    fn features(&self, py: Python<'_>, case_id: &str) -> PyResult<Py<PyAny>> {
        let f = self
            .inner
            .features
            .get(case_id)
            .ok_or_else(|| to_py(Error::UnknownCase(case_id.into())))?;
        Ok(json_to_py(py, f)?.unbind())
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        coldrec::io::save_bundle(&self.inner, &dir).map_err(to_py)
    }

    /// Ranks all items for a query case given as a features dict.
    #[pyo3(signature = (query, k = 10, metric = "cosine"))]
    fn recommend(&self, py: Python<'_>, query: &Bound<'_, PyDict>, k: usize, metric: &str) -> PyResult<Py<PyAny>> {
        let q: CaseFeatures = py_to(Some(query))?.expect("query given");
        let metric: DistanceMetric = metric.parse().map_err(to_py)?;
        let b = &self.inner;
        let drop = [q.case_id.as_str()].into_iter().collect();
        let history = b.matrix.without_cases(&drop);
        let completed = complete_matrix(&history, &CompletionConfig::default()).map_err(to_py)?.matrix;
        let res = hybrid_recommend(&q, &history, &b.features, &completed, k, metric, &b.schema).map_err(to_py)?;
        Ok(json_to_py(py, &res)?.unbind())
    }

    /// Runs the nested cross-validation; `config` overrides defaults.
    #[pyo3(signature = (config = None))]
    fn evaluate(&self, py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
        let cfg: CVConfig = py_to(config)?.unwrap_or_default();
        let b = &self.inner;
        let report = py
            .detach(|| {
                run_nested_cv(&b.matrix, &b.features, &b.schema, &b.experiments, b.reference_item.as_deref(), &cfg)
            })
            .map_err(to_py)?;
        Ok(json_to_py(py, &report)?.unbind())
    }
}

#[pyfunction]
fn load_bundle(dir: PathBuf) -> PyResult<PyBundle> {
    coldrec::io::load_bundle(&dir).map(|inner| PyBundle { inner }).map_err(to_py)
}

/// Synthetic bundle; `config` keys follow the synth configuration fields.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn synthetic_bundle(config: Option<&Bound<'_, PyDict>>) -> PyResult<PyBundle> {
    let cfg: SynthConfig = py_to(config)?.unwrap_or_default();
    generate_synthetic(&cfg).map(|s| PyBundle { inner: s.bundle }).map_err(to_py)
}

#[pyfunction]
fn sparsify(m: &PyMatrix, s: f64, seed: u64) -> PyResult<PyMatrix> {
    sparsify_matrix(&m.inner, s, seed).map(|inner| PyMatrix { inner }).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (m, method = "copula", rank = 10, seed = 0))]
fn complete(py: Python<'_>, m: &PyMatrix, method: &str, rank: usize, seed: u64) -> PyResult<PyMatrix> {
    let method = match method {
        "copula" => CompletionMethod::Copula,
        "soft_impute" | "soft-impute" => CompletionMethod::SoftImpute,
        other => return Err(PyValueError::new_err(format!("unknown method `{other}`"))),
    };
    let cfg = CompletionConfig {
        method,
        rank,
        rng_seed: seed,
        ..CompletionConfig::default()
    };
    py.detach(|| complete_matrix(&m.inner, &cfg))
        .map(|c| PyMatrix { inner: c.matrix })
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (values, min_changes = 5, amplitude_fraction = 0.01))]
fn detect_staggering(values: Vec<f64>, min_changes: usize, amplitude_fraction: f64) -> PyResult<bool> {
    let cfg = StaggerConfig {
        min_changes,
        amplitude_fraction,
    };
    detect(&Profile::new(values), &cfg).map_err(to_py)
}

/// Items within `threshold` of the best, given `{item: performance}`.
#[pyfunction]
#[pyo3(signature = (column, threshold = 0.05))]
fn relevant_items(column: Vec<(String, f64)>, threshold: f64) -> PyResult<Vec<String>> {
    relevant_of("case", &column, threshold)
        .map(|r| r.relevant.into_iter().map(|(i, _)| i).collect())
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (ranking, column, k, threshold = 0.05))]
fn rr_at_k(ranking: Vec<String>, column: Vec<(String, f64)>, k: usize, threshold: f64) -> PyResult<f64> {
    let rel = relevant_of("case", &column, threshold).map_err(to_py)?;
    rr_of(&ranking, &rel, k).map_err(to_py)
}

#[pyfunction]
fn regret(column: Vec<(String, f64)>, chosen: &str) -> PyResult<f64> {
    regret_of(&column, chosen).map_err(to_py)
}

#[pymodule]
fn coldrec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMatrix>()?;
    m.add_class::<PyBundle>()?;
    m.add_function(wrap_pyfunction!(load_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(sparsify, m)?)?;
    m.add_function(wrap_pyfunction!(complete, m)?)?;
    m.add_function(wrap_pyfunction!(detect_staggering, m)?)?;
    m.add_function(wrap_pyfunction!(relevant_items, m)?)?;
    m.add_function(wrap_pyfunction!(rr_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(regret, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
