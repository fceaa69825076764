//! Python bindings: thin wrappers over the core types plus JSON entry
//! points for the experiment harness and verification suites.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use camhd::data;
use camhd::harness;
use camhd::model::{self, ParameterRegistry, Targets};
use camhd::optim;
use camhd::tensor::Tensor;
use camhd::verify;

fn err(e: camhd::Error) -> PyErr {
    match e {
        camhd::Error::Config(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Parses an enum-ish string ("relu", "adam", ...) through its serde form.
fn from_str<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} '{s}'")))
}

fn to_matrix(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.cols();
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

fn from_matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(n * d);
    for r in &rows {
        if r.len() != d {
            return Err(PyValueError::new_err("ragged input matrix"));
        }
        data.extend_from_slice(r);
    }
    Tensor::new(vec![n, d], data).map_err(err)
}

#[pyclass]
struct Quadratic {
    inner: data::Quadratic,
}

#[pymethods]
impl Quadratic {
    #[new]
    fn new(d: usize, cond: f64, seed: u64) -> PyResult<Self> {
        Ok(Quadratic { inner: data::make_quadratic(d, cond, seed).map_err(err)? })
    }

    fn loss(&self, theta: Vec<f64>) -> f64 {
        self.inner.loss(&theta)
    }

    fn grad(&self, theta: Vec<f64>) -> Vec<f64> {
        self.inner.grad(&theta)
    }

    fn solution(&self) -> Vec<f64> {
        self.inner.solution().to_vec()
    }

    #[getter]
    fn lipschitz(&self) -> f64 {
        self.inner.lipschitz
    }
}

#[pyclass]
struct Network {
    inner: model::Network,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (sizes, activation = "relu", loss = "softmax_cross_entropy", seed = 0))]
    fn new(sizes: Vec<usize>, activation: &str, loss: &str, seed: u64) -> PyResult<Self> {
        Ok(Network {
            inner: model::Network::ffnn(
                &sizes,
                from_str(activation, "activation")?,
                from_str(loss, "loss")?,
                seed,
            ),
        })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params_flat()
    }

    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_params_flat(&params).map_err(err)
    }

    fn predict(&mut self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let t = self.inner.predict(&from_matrix(x)?).map_err(err)?;
        Ok(to_matrix(&t))
    }

    /// Forward pass against integer class labels; returns the batch loss.
    fn forward(&mut self, x: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        let lv = self
            .inner
            .forward(&from_matrix(x)?, &Targets::Labels(labels))
            .map_err(err)?;
        Ok(lv.total())
    }

    /// Gradient of the last forward pass with respect to the flat params.
    fn backward(&mut self) -> PyResult<Vec<f64>> {
        self.inner.backward().map_err(err)
    }
}

#[pyclass]
struct Optimizer {
    inner: optim::Optimizer,
    registry: ParameterRegistry,
}

#[pymethods]
impl Optimizer {
    /// Builds an optimizer for `network` from a JSON config object (same
    /// schema as the `optimizer` section of an experiment config).
    #[new]
    #[pyo3(signature = (network, config = "{}"))]
    fn new(network: &Network, config: &str) -> PyResult<Self> {
        let cfg: optim::OptimizerConfig =
            serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let registry = network.inner.registry().clone();
        Ok(Optimizer { inner: optim::Optimizer::new(cfg, &registry).map_err(err)?, registry })
    }

    /// One update step in place; returns the new parameter vector.
    fn step(&mut self, mut params: Vec<f64>, grads: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.step(&self.registry, &mut params, &grads).map_err(err)?;
        Ok(params)
    }

    fn gamma(&self) -> Vec<f64> {
        self.inner.gamma().to_vec()
    }

    #[getter]
    fn t(&self) -> u64 {
        self.inner.t()
    }
}

/// Synthetic Gaussian-cluster classification data: (inputs, labels).
#[pyfunction]
fn make_blobs(
    n: usize,
    d: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = data::make_blobs(n, d, classes, separation, seed).map_err(err)?;
    let Targets::Labels(labels) = ds.targets else { unreachable!() };
    Ok((to_matrix(&ds.inputs), labels))
}

/// Runs a full experiment from a JSON config and returns the summary as a
/// JSON string.
#[pyfunction]
fn run_experiment(config_json: &str) -> PyResult<String> {
    let cfg = harness::ExperimentConfig::from_json(config_json).map_err(err)?;
    let outcome = harness::run_experiment(&cfg).map_err(err)?;
    serde_json::to_string(&outcome.summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs a verification suite; returns one JSON report string per oracle.
#[pyfunction]
#[pyo3(signature = (suite = "all"))]
fn run_verify(suite: &str) -> PyResult<Vec<String>> {
    let reports = verify::run_suites(suite).map_err(err)?;
    reports
        .iter()
        .map(|r| serde_json::to_string(r).map_err(|e| PyRuntimeError::new_err(e.to_string())))
        .collect()
}

#[pymodule]
fn camhd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Quadratic>()?;
    m.add_class::<Network>()?;
    m.add_class::<Optimizer>()?;
    m.add_function(wrap_pyfunction!(make_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    Ok(())
}
