//! Python bindings. Matrices cross the boundary as lists of rows; structured
//! results come back as plain dicts.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use lcnn_core::autoencoder::{self as ae, SaeObjective};
use lcnn_core::data::encode_targets;
use lcnn_core::experiment::stats;
use lcnn_core::linalg::{ActivationKind, Matrix};
use lcnn_core::network::NetworkConfig;
use lcnn_core::objective::{ObjectiveSpec, Targets};
use lcnn_core::training::{self, Batch, TrainSchedule};

fn to_py_err(e: lcnn_core::Error) -> PyErr {
    match e {
        lcnn_core::Error::Io(_) => PyIOError::new_err(e.to_string()),
        lcnn_core::Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py_err)
}

fn to_dict<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Objectives are given in method notation, e.g. `{"SE": true, "LC-A": true, "lcnn_D": 1e-4}`.
fn objective(json: &str) -> PyResult<ObjectiveSpec> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Network", module = "lcnn")]
struct PyNetwork {
    inner: lcnn_core::network::Network,
}

impl PyNetwork {
    fn targets(&self, spec: &ObjectiveSpec, labels: &[usize]) -> PyResult<Targets> {
        let width = self.inner.output_width();
        let classes = if width == 1 { 2 } else { width };
        encode_targets(labels, classes, spec.loss, spec.target_magnitude).map_err(to_py_err)
    }
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (layer_widths, activations, seed = 0))]
    fn new(layer_widths: Vec<usize>, activations: Vec<String>, seed: u64) -> PyResult<Self> {
        let activations = activations
            .iter()
            .map(|a| a.parse::<ActivationKind>())
            .collect::<lcnn_core::Result<Vec<_>>>()
            .map_err(to_py_err)?;
        let inner = lcnn_core::network::Network::init(NetworkConfig {
            layer_widths,
            activations,
            seed,
        })
        .map_err(to_py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: lcnn_core::network::Network::from_json(text).map_err(to_py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py_err)
    }

    #[getter]
    fn input_width(&self) -> usize {
        self.inner.input_width()
    }

    #[getter]
    fn output_width(&self) -> usize {
        self.inner.output_width()
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let trace = self.inner.forward(&matrix(x)?).map_err(to_py_err)?;
        Ok(trace.output().to_rows())
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&matrix(x)?).map_err(to_py_err)
    }

    /// Objective terms on a labeled batch.
    fn objective(
        &self,
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        labels: Vec<usize>,
        objective_json: &str,
    ) -> PyResult<Py<PyAny>> {
        let spec = objective(objective_json)?;
        let y = self.targets(&spec, &labels)?;
        let trace = self.inner.forward(&matrix(x)?).map_err(to_py_err)?;
        let o = lcnn_core::objective::total_objective(&spec, &self.inner, &trace, &y).map_err(to_py_err)?;
        to_dict(py, &o)
    }

    #[pyo3(signature = (x, labels, objective_json, step = 1e-5, seed = 0))]
    fn gradient_check(
        &self,
        x: Vec<Vec<f64>>,
        labels: Vec<usize>,
        objective_json: &str,
        step: f64,
        seed: u64,
    ) -> PyResult<f64> {
        let spec = objective(objective_json)?;
        let y = self.targets(&spec, &labels)?;
        let check = training::gradient_check(&self.inner, &spec, &matrix(x)?, &y, step, seed).map_err(to_py_err)?;
        Ok(check.max_relative_error)
    }

    /// Trains in place and returns the per-epoch records.
    #[pyo3(signature = (x, labels, objective_json, epochs = 100, batch_size = 16, learning_rate = 0.05, lr_decay = 0.99, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        labels: Vec<usize>,
        objective_json: &str,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        lr_decay: f64,
        seed: u64,
    ) -> PyResult<Py<PyAny>> {
        let spec = objective(objective_json)?;
        let y = self.targets(&spec, &labels)?;
        let x = matrix(x)?;
        let schedule = TrainSchedule {
            epochs,
            batch_size,
            learning_rate,
            lr_decay,
            shuffle_seed: seed,
        };
        let batch = Batch {
            features: &x,
            targets: &y,
            labels: &labels,
        };
        let report = training::sgd_train(&mut self.inner, batch, None, &spec, &schedule).map_err(to_py_err)?;
        to_dict(py, &report.epochs)
    }

    /// VC-dimension bound of the trained network on `x`.
    #[pyo3(signature = (x, t = 0.9))]
    fn capacity(&self, py: Python<'_>, x: Vec<Vec<f64>>, t: f64) -> PyResult<Py<PyAny>> {
        let trace = self.inner.forward(&matrix(x)?).map_err(to_py_err)?;
        to_dict(
            py,
            &lcnn_core::capacity::vc_bound(&self.inner, &trace, t).map_err(to_py_err)?,
        )
    }
}

#[pyclass(name = "Autoencoder", module = "lcnn")]
struct PyAutoencoder {
    inner: ae::Autoencoder,
}

#[pymethods]
impl PyAutoencoder {
    #[new]
    #[pyo3(signature = (inputs, hidden, seed = 0))]
    fn new(inputs: usize, hidden: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: ae::Autoencoder::init(inputs, hidden, seed).map_err(to_py_err)?,
        })
    }

    fn encode(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.encode(&matrix(x)?).map_err(to_py_err)?.to_rows())
    }

    fn reconstruction_error(&self, x: Vec<Vec<f64>>) -> PyResult<f64> {
        ae::reconstruction_error(&self.inner, &matrix(x)?).map_err(to_py_err)
    }

    #[pyo3(signature = (eps = 0.01))]
    fn sparsity(&self, eps: f64) -> f64 {
        ae::sparsity_fraction(&self.inner.all_weights(), eps)
    }

    #[pyo3(signature = (x, c, d, rho = 0.05, step = 1e-5, seed = 0))]
    fn gradient_check(&self, x: Vec<Vec<f64>>, c: f64, d: f64, rho: f64, step: f64, seed: u64) -> PyResult<f64> {
        let check = ae::sae_gradient_check(&self.inner, &matrix(x)?, &SaeObjective::new(c, d, rho), step, seed)
            .map_err(to_py_err)?;
        Ok(check.max_relative_error)
    }

    /// Trains in place; returns the per-sample objective of each epoch.
    #[pyo3(signature = (x, c, d, rho = 0.05, epochs = 10, batch_size = 20, learning_rate = 0.1, lr_decay = 1.0, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        c: f64,
        d: f64,
        rho: f64,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        lr_decay: f64,
        seed: u64,
    ) -> PyResult<Py<PyAny>> {
        let schedule = TrainSchedule {
            epochs,
            batch_size,
            learning_rate,
            lr_decay,
            shuffle_seed: seed,
        };
        let report =
            ae::sae_train(&mut self.inner, &matrix(x)?, &SaeObjective::new(c, d, rho), &schedule).map_err(to_py_err)?;
        to_dict(py, &report.epochs)
    }
}

/// Number of dichotomies of `m` points in general position in `n` dimensions.
#[pyfunction]
fn dichotomy_count(py: Python<'_>, m: usize, n: usize) -> PyResult<Py<PyAny>> {
    let text = lcnn_core::capacity::dichotomy_count(m, n).to_string();
    Ok(py.import("builtins")?.getattr("int")?.call1((text,))?.unbind())
}

#[pyfunction]
fn wilcoxon(py: Python<'_>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Py<PyAny>> {
    to_dict(py, &stats::wilcoxon_signed_rank(&a, &b).map_err(to_py_err)?)
}

/// Friedman test on a datasets × methods score table.
#[pyfunction]
fn friedman(py: Python<'_>, scores: Vec<Vec<f64>>) -> PyResult<Py<PyAny>> {
    to_dict(py, &stats::friedman_test(&matrix(scores)?).map_err(to_py_err)?)
}

/// Runs a manifest, writes the bundle under `out_dir` and returns the
/// comparison table.
#[pyfunction]
fn run_experiment(py: Python<'_>, manifest: &str, out_dir: &str) -> PyResult<Py<PyAny>> {
    let out = py
        .detach(|| lcnn_core::experiment::run_experiment(manifest, out_dir))
        .map_err(to_py_err)?;
    to_dict(py, &out.table.without_timing())
}

#[pymodule]
fn lcnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyAutoencoder>()?;
    m.add_function(wrap_pyfunction!(dichotomy_count, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(friedman, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
