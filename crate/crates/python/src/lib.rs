//! Python bindings: datasets, pooled/subgroup/hierarchical fits,
//! cross-validation, simulation and calibration.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use surrogacy::crossval::{loo_metrics, loo_predict};
use surrogacy::data::{
    build_study_blocks, parse_dataset, validate_dataset, write_dataset, CovarianceOptions,
    Severity, StudyBlock,
};
use surrogacy::mcmc::{McmcSettings, PosteriorSummary};
use surrogacy::model::{
    evaluate_criteria, FitOptions, HierarchicalMode, ModelKind, PriorConfig, PsiPrior,
    SurrogacySummary,
};
use surrogacy::simgen::{sbc_run, simulate_dataset, SimDesign};
use surrogacy::SurrogacyError;

fn to_py(e: SurrogacyError) -> PyErr {
    if e.is_data_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

fn settings(
    iterations: usize,
    burn_in: usize,
    thin: usize,
    chains: usize,
    seed: u64,
) -> PyResult<McmcSettings> {
    let s = McmcSettings {
        iterations,
        burn_in,
        thin,
        chains,
        seed,
        ..McmcSettings::default()
    };
    s.validate().map_err(to_py)?;
    Ok(s)
}

/// `priors` is a TOML table of prior settings; `psi_prior` overrides its ψ prior.
fn options(priors: Option<&str>, psi_prior: Option<&str>) -> PyResult<FitOptions> {
    let mut p = match priors {
        Some(text) => toml::from_str::<PriorConfig>(text)
            .map_err(|e| PyValueError::new_err(format!("invalid priors: {e}")))?,
        None => PriorConfig::default(),
    };
    if let Some(s) = psi_prior {
        p.psi = parse::<PsiPrior>(s)?;
    }
    Ok(FitOptions {
        priors: p,
        ..FitOptions::default()
    })
}

fn summary_dict<'py>(py: Python<'py>, s: &PosteriorSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mean", s.mean)?;
    d.set_item("sd", s.sd)?;
    d.set_item("q2_5", s.q2_5)?;
    d.set_item("q50", s.q50)?;
    d.set_item("q97_5", s.q97_5)?;
    Ok(d)
}

fn verdict_dict<'py>(
    py: Python<'py>,
    p: &SurrogacySummary,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let v = evaluate_criteria(p, threshold);
    let d = PyDict::new(py);
    d.set_item("intercept_zero", v.intercept_zero)?;
    d.set_item("slope_nonzero", v.slope_nonzero)?;
    d.set_item("variance_small", v.variance_small)?;
    d.set_item("label", v.label.to_string())?;
    Ok(d)
}

/// Contrast-level meta-analytic dataset.
#[pyclass(name = "Dataset", frozen)]
pub struct PyDataset {
    inner: surrogacy::data::Dataset,
}

impl PyDataset {
    fn blocks(&self) -> PyResult<Vec<StudyBlock>> {
        build_study_blocks(&self.inner, &CovarianceOptions::default()).map_err(to_py)
    }
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        let f = std::fs::File::open(path).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyDataset {
            inner: parse_dataset(f).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_csv_string(text: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: parse_dataset(text.as_bytes()).map_err(to_py)?,
        })
    }

    fn to_csv_string(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        write_dataset(&self.inner, &mut buf).map_err(to_py)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn study_ids(&self) -> Vec<String> {
        self.inner.study_ids()
    }

    fn treatments(&self) -> Vec<String> {
        self.inner.treatments()
    }

    /// Surrogate effects as `(y1, se1)` and final effects as `(y2, se2)` pairs.
    fn effects(&self) -> Vec<(f64, f64, f64, f64)> {
        self.inner
            .contrasts
            .iter()
            .map(|c| (c.y1, c.se1, c.y2, c.se2))
            .collect()
    }

    fn harmonize(&self, target: &str) -> PyResult<Self> {
        let t = parse(target)?;
        Ok(PyDataset {
            inner: surrogacy::scale::harmonize_surrogate_scale(&self.inner, t).map_err(to_py)?,
        })
    }

    /// Findings as `(severity, study_id, contrast_id, message)` tuples.
    fn validate(&self) -> Vec<(String, Option<String>, Option<String>, String)> {
        validate_dataset(&self.inner)
            .findings
            .into_iter()
            .map(|f| {
                let sev = match f.severity {
                    Severity::Error => "error",
                    Severity::Warning => "warning",
                };
                (sev.to_string(), f.study_id, f.contrast_id, f.message)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} contrasts, {} studies)",
            self.inner.len(),
            self.inner.study_ids().len()
        )
    }
}

/// Pooled or single-treatment fit.
#[pyclass(name = "Posterior", frozen)]
pub struct PyPosterior {
    inner: surrogacy::model::SurrogacyPosterior,
}

#[pymethods]
impl PyPosterior {
    #[getter]
    fn treatment(&self) -> Option<String> {
        self.inner.treatment.clone()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner
            .summaries
            .iter()
            .map(|s| s.name.clone())
            .collect()
    }

    fn summary<'py>(&self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyDict>> {
        summary_dict(py, self.inner.summary(name).map_err(to_py)?)
    }

    fn draws(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner.draws(name).map_err(to_py)
    }

    /// `{name: (ess, rhat)}`.
    fn diagnostics(&self) -> BTreeMap<String, (f64, Option<f64>)> {
        self.inner
            .diagnostics
            .parameters
            .iter()
            .map(|d| (d.name.clone(), (d.ess, d.rhat)))
            .collect()
    }

    #[pyo3(signature = (psi2_threshold = surrogacy::model::DEFAULT_PSI2_THRESHOLD))]
    fn verdict<'py>(&self, py: Python<'py>, psi2_threshold: f64) -> PyResult<Bound<'py, PyDict>> {
        verdict_dict(py, &self.inner.parameters().map_err(to_py)?, psi2_threshold)
    }
}

/// Full or partial exchangeability fit across treatments.
#[pyclass(name = "HierarchicalPosterior", frozen)]
pub struct PyHierarchicalPosterior {
    inner: surrogacy::model::HierarchicalPosterior,
}

#[pymethods]
impl PyHierarchicalPosterior {
    #[getter]
    fn treatments(&self) -> Vec<String> {
        self.inner.treatments.clone()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.mode {
            HierarchicalMode::Full => "full",
            HierarchicalMode::Partial => "partial",
        }
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner
            .summaries
            .iter()
            .map(|s| s.name.clone())
            .collect()
    }

    fn summary<'py>(&self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyDict>> {
        summary_dict(py, self.inner.summary(name).map_err(to_py)?)
    }

    fn draws(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner.draws(name).map_err(to_py)
    }

    #[pyo3(signature = (treatment, psi2_threshold = surrogacy::model::DEFAULT_PSI2_THRESHOLD))]
    fn verdict<'py>(
        &self,
        py: Python<'py>,
        treatment: &str,
        psi2_threshold: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let p = self.inner.treatment_parameters(treatment).map_err(to_py)?;
        verdict_dict(py, &p, psi2_threshold)
    }

    /// `{treatment: (membership, weight_mean)}`; empty for the full model.
    fn mixture_weights(&self) -> BTreeMap<String, (f64, f64)> {
        self.inner
            .mixture_weights()
            .into_iter()
            .map(|m| (m.treatment, (m.membership, m.weight_mean)))
            .collect()
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, iterations = 20000, burn_in = 10000, thin = 2, chains = 2, seed = 1, priors = None, psi_prior = None))]
#[allow(clippy::too_many_arguments)]
fn fit_pooled(
    py: Python<'_>,
    dataset: &PyDataset,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    chains: usize,
    seed: u64,
    priors: Option<&str>,
    psi_prior: Option<&str>,
) -> PyResult<PyPosterior> {
    let s = settings(iterations, burn_in, thin, chains, seed)?;
    let opts = options(priors, psi_prior)?;
    let blocks = dataset.blocks()?;
    let inner = py
        .detach(|| surrogacy::model::fit_pooled(&blocks, &opts, &s))
        .map_err(to_py)?;
    Ok(PyPosterior { inner })
}

#[pyfunction]
#[pyo3(signature = (dataset, treatment, iterations = 20000, burn_in = 10000, thin = 2, chains = 2, seed = 1, priors = None, psi_prior = None))]
#[allow(clippy::too_many_arguments)]
fn fit_subgroup(
    py: Python<'_>,
    dataset: &PyDataset,
    treatment: &str,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    chains: usize,
    seed: u64,
    priors: Option<&str>,
    psi_prior: Option<&str>,
) -> PyResult<PyPosterior> {
    let s = settings(iterations, burn_in, thin, chains, seed)?;
    let opts = options(priors, psi_prior)?;
    let blocks = dataset.blocks()?;
    let inner = py
        .detach(|| surrogacy::model::fit_subgroup(&blocks, treatment, &opts, &s))
        .map_err(to_py)?;
    Ok(PyPosterior { inner })
}

#[pyfunction]
#[pyo3(signature = (dataset, mode = "full", iterations = 20000, burn_in = 10000, thin = 2, chains = 2, seed = 1, priors = None, psi_prior = None))]
#[allow(clippy::too_many_arguments)]
fn fit_hierarchical(
    py: Python<'_>,
    dataset: &PyDataset,
    mode: &str,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    chains: usize,
    seed: u64,
    priors: Option<&str>,
    psi_prior: Option<&str>,
) -> PyResult<PyHierarchicalPosterior> {
    let mode = parse::<ModelKind>(mode)?
        .hierarchical_mode()
        .ok_or_else(|| PyValueError::new_err("mode must be `full` or `partial`"))?;
    let s = settings(iterations, burn_in, thin, chains, seed)?;
    let opts = options(priors, psi_prior)?;
    let blocks = dataset.blocks()?;
    let inner = py
        .detach(|| surrogacy::model::fit_hierarchical(&blocks, mode, &opts, &s))
        .map_err(to_py)?;
    Ok(PyHierarchicalPosterior { inner })
}

/// Leave-one-study-out predictions. Returns `(records, metrics)`.
#[pyfunction]
#[pyo3(signature = (dataset, model = "pooled", iterations = 20000, burn_in = 10000, thin = 2, chains = 2, seed = 1, priors = None, psi_prior = None))]
#[allow(clippy::too_many_arguments)]
fn loo<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    model: &str,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    chains: usize,
    seed: u64,
    priors: Option<&str>,
    psi_prior: Option<&str>,
) -> PyResult<(Vec<Bound<'py, PyDict>>, Bound<'py, PyDict>)> {
    let kind = parse::<ModelKind>(model)?;
    let s = settings(iterations, burn_in, thin, chains, seed)?;
    let opts = options(priors, psi_prior)?;
    let blocks = dataset.blocks()?;
    let recs = py
        .detach(|| loo_predict(&blocks, kind, &opts, &s))
        .map_err(to_py)?;
    let m = loo_metrics(&recs).map_err(to_py)?;
    let mut rows = Vec::with_capacity(recs.len());
    for r in &recs {
        let d = PyDict::new(py);
        d.set_item("study_id", &r.study_id)?;
        d.set_item("contrast_id", &r.contrast_id)?;
        d.set_item("observed", r.observed)?;
        d.set_item("pred", r.pred)?;
        d.set_item("pred_lo", r.pred_lo)?;
        d.set_item("pred_hi", r.pred_hi)?;
        d.set_item("covered", r.covered)?;
        rows.push(d);
    }
    let metrics = PyDict::new(py);
    metrics.set_item("coverage", m.coverage)?;
    metrics.set_item("mad", m.mad)?;
    metrics.set_item("width_ratio", m.width_ratio)?;
    Ok((rows, metrics))
}

/// Synthetic dataset; `design` is a TOML simulation design.
#[pyfunction]
#[pyo3(signature = (seed = 1, design = None))]
fn simulate(seed: u64, design: Option<&str>) -> PyResult<PyDataset> {
    let d = match design {
        Some(text) => toml::from_str::<SimDesign>(text)
            .map_err(|e| PyValueError::new_err(format!("invalid design: {e}")))?,
        None => SimDesign::reference_design(),
    };
    Ok(PyDataset {
        inner: simulate_dataset(&d.with_seed(seed)).map_err(to_py)?,
    })
}

/// Simulation-based calibration of the pooled model on the default design.
/// Returns `{parameter: {"coverage", "p_value", "histogram"}}`.
#[pyfunction]
#[pyo3(signature = (reps = 200, iterations = 5000, burn_in = 2500, thin = 1, chains = 2, seed = 1, priors = None, design = None))]
#[allow(clippy::too_many_arguments)]
fn sbc<'py>(
    py: Python<'py>,
    reps: usize,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    chains: usize,
    seed: u64,
    priors: Option<&str>,
    design: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = settings(iterations, burn_in, thin, chains, seed)?;
    let opts = options(priors, None)?;
    let d = match design {
        Some(text) => toml::from_str::<SimDesign>(text)
            .map_err(|e| PyValueError::new_err(format!("invalid design: {e}")))?,
        None => SimDesign::reference_design(),
    };
    let report = py
        .detach(|| sbc_run(&d, &opts, reps, ModelKind::Pooled, &s))
        .map_err(to_py)?;
    let out = PyDict::new(py);
    for p in &report.parameters {
        let e = PyDict::new(py);
        e.set_item("coverage", p.coverage)?;
        e.set_item("p_value", p.p_value)?;
        e.set_item("histogram", p.histogram.clone())?;
        out.set_item(&p.name, e)?;
    }
    Ok(out)
}

#[pymodule]
fn surrogacy_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPosterior>()?;
    m.add_class::<PyHierarchicalPosterior>()?;
    m.add_function(wrap_pyfunction!(fit_pooled, m)?)?;
    m.add_function(wrap_pyfunction!(fit_subgroup, m)?)?;
    m.add_function(wrap_pyfunction!(fit_hierarchical, m)?)?;
    m.add_function(wrap_pyfunction!(loo, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(sbc, m)?)?;
    Ok(())
}
