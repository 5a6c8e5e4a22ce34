//! Python bindings.
//!
//! Objectives are either a flat list of values over the joint support (last
//! variable fastest) or a Python callable taking a list of category indices.

use std::path::PathBuf;
use std::sync::Mutex;

use catgrad_core::estimators::{self as est, BiasVarianceReport};
use catgrad_core::harness::{self, ExperimentConfig, PRESETS};
use catgrad_core::{
    rng, Error, EstimatorConfig, EstimatorKind, Factorisation as CoreFactorisation, GradEstimate, GradTable,
    LogitTable, Objective, TableObjective, DEFAULT_BUDGET,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(catgrad, CatgradError, PyValueError);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => CatgradError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Factorisation", module = "catgrad", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Factorisation {
    inner: CoreFactorisation,
}

#[pymethods]
impl Factorisation {
    /// Independent factors, one logit row per variable.
    #[staticmethod]
    fn independent(logits: Vec<Vec<f64>>) -> PyResult<Self> {
        let table = LogitTable::new(logits).map_err(err)?;
        Ok(Self {
            inner: CoreFactorisation::independent(&table),
        })
    }

    /// Chain factors: `tables[d]` has one row per assignment of `x[..d]`.
    #[staticmethod]
    fn chain(cards: Vec<usize>, tables: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        Ok(Self {
            inner: CoreFactorisation::chain(cards, tables).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (cards, scale = 1.0, seed = 0))]
    fn random_chain(cards: Vec<usize>, scale: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreFactorisation::random_chain(&cards, scale, &mut rng::seeded(seed)).map_err(err)?,
        })
    }

    #[getter]
    fn cards(&self) -> Vec<usize> {
        self.inner.cards().to_vec()
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims()
    }

    #[getter]
    fn is_independent(&self) -> bool {
        self.inner.is_independent()
    }

    #[pyo3(signature = (d, row = 0))]
    fn probs(&self, d: usize, row: usize) -> PyResult<Vec<f64>> {
        if d >= self.inner.dims() || row >= self.inner.rows_of(d) {
            return Err(CatgradError::new_err(format!("no row {row} for variable {d}")));
        }
        Ok(self.inner.probs(d, row).to_vec())
    }

    fn log_prob(&self, x: Vec<usize>) -> PyResult<f64> {
        self.inner.log_prob(&x).map_err(err)
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        let batch = self.inner.sample_ancestral(n, &mut rng::seeded(seed)).map_err(err)?;
        Ok(batch.iter().map(<[usize]>::to_vec).collect())
    }

    fn __repr__(&self) -> String {
        let kind = if self.inner.is_independent() { "independent" } else { "chain" };
        format!("Factorisation({kind}, cards={:?})", self.inner.cards())
    }
}

/// A Python callable as an objective. Exceptions raised by the callable are
/// kept and re-raised once the Rust call returns.
struct Callback {
    f: Py<PyAny>,
    error: Mutex<Option<PyErr>>,
}

impl Objective for Callback {
    fn eval(&self, x: &[usize]) -> f64 {
        Python::attach(|py| match self.f.call1(py, (x.to_vec(),)).and_then(|v| v.extract::<f64>(py)) {
            Ok(v) => v,
            Err(e) => {
                let mut slot = self.error.lock().unwrap();
                if slot.is_none() {
                    *slot = Some(e);
                }
                f64::NAN
            }
        })
    }
}

enum PyObjective {
    Table(TableObjective),
    Callable(Callback),
}

impl PyObjective {
    fn new(fact: &CoreFactorisation, f: &Bound<'_, PyAny>) -> PyResult<Self> {
        if f.is_callable() {
            return Ok(Self::Callable(Callback {
                f: f.clone().unbind(),
                error: Mutex::new(None),
            }));
        }
        let values: Vec<f64> = f
            .extract()
            .map_err(|_| CatgradError::new_err("objective must be callable or a list of floats"))?;
        Ok(Self::Table(TableObjective::new(fact.cards().to_vec(), values).map_err(err)?))
    }

    fn as_dyn(&self) -> &dyn Objective {
        match self {
            Self::Table(t) => t,
            Self::Callable(c) => c,
        }
    }

    /// Raises the first callback exception, if any, otherwise maps `result`.
    fn finish<T>(&self, result: catgrad_core::Result<T>) -> PyResult<T> {
        if let Self::Callable(c) = self {
            if let Some(e) = c.error.lock().unwrap().take() {
                return Err(e);
            }
        }
        result.map_err(err)
    }
}

fn nested(g: &GradTable) -> Vec<Vec<Vec<f64>>> {
    g.blocks.clone()
}

fn estimate_dict<'py>(py: Python<'py>, e: &GradEstimate) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("grad", nested(&e.grad))?;
    d.set_item("value", e.value)?;
    d.set_item("samples_drawn", e.samples_drawn)?;
    d.set_item("function_evals", e.function_evals)?;
    Ok(d)
}

fn config(estimator: &str, n: usize, fresh: bool, temperature: f64) -> PyResult<EstimatorConfig> {
    let kind: EstimatorKind = estimator.parse().map_err(err)?;
    let c = EstimatorConfig::new(kind, n).fresh(fresh).with_temperature(temperature);
    c.validate().map_err(err)?;
    Ok(c)
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    catgrad_core::softmax_row(&logits).map_err(err)
}

#[pyfunction]
fn estimators() -> Vec<&'static str> {
    EstimatorKind::ALL.iter().map(|k| k.name()).collect()
}

#[pyfunction]
fn exact_expectation(fact: &Factorisation, f: &Bound<'_, PyAny>) -> PyResult<f64> {
    let obj = PyObjective::new(&fact.inner, f)?;
    obj.finish(catgrad_core::exact_expectation(&fact.inner, obj.as_dyn(), DEFAULT_BUDGET))
}

#[pyfunction]
fn exact_gradient(fact: &Factorisation, f: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let obj = PyObjective::new(&fact.inner, f)?;
    obj.finish(catgrad_core::exact_gradient(&fact.inner, obj.as_dyn(), DEFAULT_BUDGET))
        .map(|g| nested(&g))
}

/// One gradient estimate. Gumbel-Softmax needs a relaxation and is therefore
/// only available through the experiment presets.
#[pyfunction]
#[pyo3(signature = (fact, f, estimator, n, seed = 0, fresh = false, temperature = 1.0))]
#[allow(clippy::too_many_arguments)]
fn estimate<'py>(
    py: Python<'py>,
    fact: &Factorisation,
    f: &Bound<'py, PyAny>,
    estimator: &str,
    n: usize,
    seed: u64,
    fresh: bool,
    temperature: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(estimator, n, fresh, temperature)?;
    let obj = PyObjective::new(&fact.inner, f)?;
    let e = obj.finish(est::estimate(&cfg, &fact.inner, obj.as_dyn(), 0, &mut rng::seeded(seed)))?;
    estimate_dict(py, &e)
}

#[pyfunction]
#[pyo3(signature = (fact, f, estimator, n, trials, seed = 0, fresh = false))]
#[allow(clippy::too_many_arguments)]
fn bias_variance<'py>(
    py: Python<'py>,
    fact: &Factorisation,
    f: &Bound<'py, PyAny>,
    estimator: &str,
    n: usize,
    trials: usize,
    seed: u64,
    fresh: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(estimator, n, fresh, 1.0)?;
    let obj = PyObjective::new(&fact.inner, f)?;
    let inner = fact.inner.clone();
    let result = py.detach(|| est::bias_variance(&cfg, &inner, obj.as_dyn(), trials, seed, DEFAULT_BUDGET));
    let r: BiasVarianceReport = obj.finish(result)?;
    let d = PyDict::new(py);
    d.set_item("trials", r.trials)?;
    d.set_item("mean", &r.mean)?;
    d.set_item("exact", &r.exact)?;
    d.set_item("bias", &r.bias)?;
    d.set_item("variance", &r.variance)?;
    d.set_item("bias_norm", r.bias_norm)?;
    d.set_item("bias_band", r.bias_band())?;
    d.set_item("variance_sum", r.variance_sum)?;
    d.set_item("samples_drawn", r.samples_drawn)?;
    d.set_item("function_evals", r.function_evals)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (logits, temperature, seed = 0))]
fn gumbel_softmax_sample(logits: Vec<f64>, temperature: f64, seed: u64) -> PyResult<Vec<f64>> {
    est::gumbel_softmax_sample(&logits, temperature, &mut rng::seeded(seed)).map_err(err)
}

/// `(name, experiment)` for every preset.
#[pyfunction]
fn presets() -> Vec<(&'static str, &'static str)> {
    PRESETS.iter().map(|(n, e)| (*n, e.name())).collect()
}

/// The TOML text of a preset, suitable for editing and passing back to
/// [`run_experiment`].
#[pyfunction]
fn preset_config(name: &str) -> PyResult<String> {
    ExperimentConfig::preset(name).and_then(|c| c.to_toml()).map_err(err)
}

/// Runs a TOML experiment config and returns the report as JSON text.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml_str(config).map_err(err)?;
    let report = py.detach(|| harness::run_experiment(&cfg)).map_err(err)?;
    serde_json::to_string(&report).map_err(|e| CatgradError::new_err(e.to_string()))
}

/// `(suite, passed, detail)` for every self-test suite.
#[pyfunction]
fn selftest(py: Python<'_>) -> Vec<(&'static str, bool, String)> {
    py.detach(|| harness::selftest(None))
        .suites
        .into_iter()
        .map(|s| (s.name, s.passed, s.detail))
        .collect()
}

/// Images as rows of floats in `[0, 1]`, and their labels.
#[pyfunction]
fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let (x, y) = harness::load_idx(&images, &labels).map_err(err)?;
    Ok((x.rows().into_iter().map(|r| r.to_vec()).collect(), y))
}

#[pymodule]
fn catgrad(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("CatgradError", m.py().get_type::<CatgradError>())?;
    m.add_class::<Factorisation>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(estimators, m)?)?;
    m.add_function(wrap_pyfunction!(exact_expectation, m)?)?;
    m.add_function(wrap_pyfunction!(exact_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(bias_variance, m)?)?;
    m.add_function(wrap_pyfunction!(gumbel_softmax_sample, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    Ok(())
}
