//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists via JSON.

use std::collections::BTreeSet;
use std::path::PathBuf;

use novelty_core::analysis::NoveltyReport;
use novelty_core::llm::MockLlm;
use novelty_core::paper::{compute_quality_flag, Assessment, CanonicalId, Criterion, VerificationVerdict};
use novelty_core::pipeline::{run_pipeline as run_core, PaperInput, PipelineConfig};
use novelty_core::render::{output_filename, render_markdown, RenderConfig};
use novelty_core::retrieval::{MockSearch, RecordingSleeper};
use novelty_core::taxonomy::{deterministic_repair, validate_taxonomy as validate_core, TaxonomyNode};
use novelty_core::text::tokenize;
use novelty_core::verification::{verify_quote_tokens, VerifyConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A JSON string is taken as is; anything else goes through `json.dumps`.
fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    match obj.extract::<String>() {
        Ok(s) => Ok(s),
        Err(_) => obj.py().import("json")?.call_method1("dumps", (obj,))?.extract(),
    }
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    serde_json::from_str(&json_text(obj)?).map_err(value_err)
}

/// A paper identity of the form `scheme:value`.
#[pyclass(name = "CanonicalId", frozen, eq, hash)]
#[derive(PartialEq, Eq, Hash)]
struct PyCanonicalId(CanonicalId);

#[pymethods]
impl PyCanonicalId {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        text.parse().map(PyCanonicalId).map_err(value_err)
    }

    #[staticmethod]
    fn from_title(title: &str) -> PyResult<Self> {
        CanonicalId::from_title(title).map(PyCanonicalId).map_err(value_err)
    }

    #[getter]
    fn scheme(&self) -> &'static str {
        self.0.scheme.as_str()
    }

    #[getter]
    fn value(&self) -> &str {
        &self.0.value
    }

    fn slug(&self) -> String {
        self.0.slug()
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("CanonicalId('{}')", self.0)
    }
}

#[pyclass(name = "Taxonomy")]
struct PyTaxonomy(TaxonomyNode);

#[pymethods]
impl PyTaxonomy {
    /// Accepts a JSON string or an equivalent dict.
    #[new]
    fn new(obj: &Bound<'_, PyAny>) -> PyResult<Self> {
        from_py(obj).map(PyTaxonomy)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.0.name
    }

    fn depth(&self) -> usize {
        self.0.depth()
    }

    fn paper_ids(&self) -> Vec<String> {
        self.0.all_paper_ids().into_iter().map(str::to_string).collect()
    }

    fn leaf_names(&self) -> Vec<String> {
        self.0.leaves().into_iter().map(|l| l.name.clone()).collect()
    }

    #[pyo3(signature = (allowed, original=None))]
    fn validate<'py>(&self, py: Python<'py>, allowed: BTreeSet<String>, original: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &validate_core(&self.0, &allowed, original))
    }

    /// Drops unknown ids and repeated placements. Missing ids are left for review.
    #[pyo3(signature = (allowed, original=None))]
    fn repaired(&self, allowed: BTreeSet<String>, original: Option<&str>) -> Self {
        let report = validate_core(&self.0, &allowed, original);
        PyTaxonomy(deterministic_repair(&self.0, &report))
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    fn content_hash(&self) -> String {
        self.0.content_hash()
    }
}

#[pyclass(name = "Report")]
struct PyReport(NoveltyReport);

#[pymethods]
impl PyReport {
    #[new]
    fn new(obj: &Bound<'_, PyAny>) -> PyResult<Self> {
        NoveltyReport::from_json(&json_text(obj)?).map(PyReport).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(value_err)?;
        NoveltyReport::from_json(&text).map(PyReport).map_err(value_err)
    }

    #[getter]
    fn title(&self) -> &str {
        &self.0.original_paper.title
    }

    #[getter]
    fn flags(&self) -> Vec<String> {
        self.0.metadata.flags.clone()
    }

    fn taxonomy(&self) -> PyTaxonomy {
        PyTaxonomy(self.0.core_task_survey.taxonomy.clone())
    }

    fn output_filename(&self) -> String {
        output_filename(&self.0)
    }

    #[pyo3(signature = (quote_limit=None))]
    fn render_markdown(&self, quote_limit: Option<usize>) -> PyResult<String> {
        let mut cfg = RenderConfig::default();
        if let Some(n) = quote_limit {
            cfg.quote_truncation_limit = n;
        }
        render_markdown(&self.0, &cfg).map_err(value_err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }
}

/// Locates `quote` in `document`. Returns found, match_score and the score parts.
#[pyfunction]
fn verify_quote<'py>(py: Python<'py>, quote: &str, document: &str) -> PyResult<Bound<'py, PyAny>> {
    let v = verify_quote_tokens(quote, &tokenize(document), &VerifyConfig::default());
    to_py(
        py,
        &serde_json::json!({
            "found": v.location.found,
            "match_score": v.location.match_score,
            "anchors": v.anchors.len(),
            "hit_ratio": v.parts.hit_ratio,
            "mean_coverage": v.parts.mean_coverage,
            "compact": v.parts.compact,
        }),
    )
}

/// `criteria` is a list of `(type, assessment)` pairs. Returns "perfect", "partial" or "no".
#[pyfunction]
fn quality_flag(criteria: Vec<(String, String)>) -> PyResult<String> {
    let criteria = criteria
        .into_iter()
        .map(|(t, a)| {
            let assessment: Assessment = serde_json::from_value(serde_json::Value::String(a)).map_err(value_err)?;
            Ok(Criterion::new(t, assessment))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let flag = compute_quality_flag(&VerificationVerdict { criteria }).map_err(value_err)?;
    Ok(serde_json::to_value(flag).map_err(value_err)?.as_str().unwrap_or_default().to_string())
}

#[pyfunction]
#[pyo3(signature = (taxonomy, allowed, original=None))]
fn validate_taxonomy<'py>(
    py: Python<'py>,
    taxonomy: &Bound<'py, PyAny>,
    allowed: BTreeSet<String>,
    original: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let tax: TaxonomyNode = from_py(taxonomy)?;
    to_py(py, &validate_core(&tax, &allowed, original))
}

/// Runs all phases offline against fixture files. Returns the run manifest.
#[pyfunction]
#[pyo3(signature = (paper, out_dir, llm_fixture, search_fixture, generated_at=None, concurrency=1, resume=false))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline<'py>(
    py: Python<'py>,
    paper: PathBuf,
    out_dir: PathBuf,
    llm_fixture: PathBuf,
    search_fixture: PathBuf,
    generated_at: Option<String>,
    concurrency: usize,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let read = |p: &PathBuf| std::fs::read_to_string(p).map_err(|e| value_err(format!("{}: {e}", p.display())));
    let llm = MockLlm::from_json(&read(&llm_fixture)?).map_err(value_err)?;
    let search = MockSearch::from_json(&read(&search_fixture)?).map_err(value_err)?;
    let paper = PaperInput::load(&paper).map_err(value_err)?;
    let cfg = PipelineConfig {
        output_dir: out_dir,
        generated_at,
        concurrency,
        resume,
        ..PipelineConfig::default()
    };
    let manifest = py
        .detach(|| run_core(&paper, &cfg, &llm, &search, &RecordingSleeper::default()))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &manifest)
}

#[pymodule]
fn novelty(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCanonicalId>()?;
    m.add_class::<PyTaxonomy>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(verify_quote, m)?)?;
    m.add_function(wrap_pyfunction!(quality_flag, m)?)?;
    m.add_function(wrap_pyfunction!(validate_taxonomy, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
