//! Python bindings. Results cross the boundary as plain dicts and lists.

use fedrca_core::config::RunConfig;
use fedrca_core::pipeline::{self, Method, SweepAxis};
use fedrca_core::privacy;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde_json::{json, Value};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn load(text: Option<&str>, overrides: &[String]) -> Result<RunConfig, fedrca_core::Error> {
    RunConfig::from_toml_with_overrides(text.unwrap_or(""), overrides)
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (v.to_string(),))?.unbind())
}

fn simulate_value(cfg: &RunConfig) -> Result<Value, fedrca_core::Error> {
    let world = pipeline::build_world(cfg)?;
    let s = pipeline::generate_splits(cfg, &world)?;
    let split = |d: &fedrca_core::synthetic::Dataset| json!({ "y": d.obs, "x": d.x, "episodes": d.episodes });
    Ok(json!({
        "checksum": world.checksum(),
        "train": split(&s.train),
        "calib": split(&s.calib),
        "test": split(&s.test),
    }))
}

fn run_value(cfg: &RunConfig, method: Method) -> Result<Value, fedrca_core::Error> {
    let out = pipeline::run(cfg, method)?;
    let r = &out.trained.report;
    Ok(json!({
        "metrics": out.evaluation.metrics,
        "server_loss": r.server_losses(),
        "local_loss": r.rounds.iter().map(|m| m.local_losses.clone()).collect::<Vec<_>>(),
        "privacy": out.trained.derived,
    }))
}

/// The fully resolved default configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml()
}

/// Resolve a TOML document plus `key=value` overrides.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=Vec::new()))]
fn resolve_config(config: Option<&str>, overrides: Vec<String>) -> PyResult<String> {
    Ok(load(config, &overrides).map_err(err)?.to_toml())
}

/// Generate the train, calibration and test splits.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=Vec::new()))]
fn simulate(py: Python<'_>, config: Option<&str>, overrides: Vec<String>) -> PyResult<Py<PyAny>> {
    let cfg = load(config, &overrides).map_err(err)?;
    let v = py.detach(|| simulate_value(&cfg)).map_err(err)?;
    to_py(py, &v)
}

/// Train and evaluate one method end to end.
#[pyfunction]
#[pyo3(signature = (config=None, method="framework", overrides=Vec::new()))]
fn run(py: Python<'_>, config: Option<&str>, method: &str, overrides: Vec<String>) -> PyResult<Py<PyAny>> {
    let m = Method::parse(method).ok_or_else(|| err(format!("unknown method {method:?}")))?;
    let cfg = load(config, &overrides).map_err(err)?;
    let v = py.detach(|| run_value(&cfg, m)).map_err(err)?;
    to_py(py, &v)
}

/// One row per (value, repeat).
#[pyfunction]
#[pyo3(signature = (axis, values, config=None, overrides=Vec::new()))]
fn sweep(
    py: Python<'_>,
    axis: &str,
    values: Vec<f64>,
    config: Option<&str>,
    overrides: Vec<String>,
) -> PyResult<Py<PyAny>> {
    let a = SweepAxis::parse(axis).ok_or_else(|| err(format!("unknown sweep axis {axis:?}")))?;
    let cfg = load(config, &overrides).map_err(err)?;
    let rows = py.detach(|| pipeline::sweep(&cfg, a, &values)).map_err(err)?;
    to_py(py, &json!(rows))
}

/// Gaussian-mechanism noise multiplier for one release.
#[pyfunction]
fn gaussian_factor(epsilon: f64, delta: f64) -> PyResult<f64> {
    privacy::gaussian_factor(epsilon, delta).map_err(err)
}

/// Randomized-response retention probability.
#[pyfunction]
fn rr_probability(epsilon: f64) -> PyResult<f64> {
    privacy::rr_probability(epsilon).map_err(err)
}

#[pymodule]
fn fedrca(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("METHODS", Method::ALL.map(Method::as_str).to_vec())?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_factor, m)?)?;
    m.add_function(wrap_pyfunction!(rr_probability, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let o = ["experiment.train_steps=200", "experiment.calib_steps=300", "experiment.test_steps=1500"];
        load(None, &o.map(String::from)).unwrap()
    }

    #[test]
    fn simulate_shapes() {
        let v = simulate_value(&small()).unwrap();
        assert_eq!(v["test"]["y"].as_array().unwrap().len(), 2);
        assert_eq!(v["test"]["y"][0].as_array().unwrap().len(), 1500);
        assert_eq!(v["checksum"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn run_reports_metrics() {
        let v = run_value(&small(), Method::Framework).unwrap();
        assert_eq!(v["server_loss"].as_array().unwrap().len(), 200 * small().experiment.epochs);
        assert!(v["metrics"]["arl"].is_object());
    }

    #[test]
    fn bad_override_is_an_error() {
        assert!(load(None, &["world.clients=0".to_string()]).is_err());
    }
}
