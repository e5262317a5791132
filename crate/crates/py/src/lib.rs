//! Python bindings: road networks, state-vector math, the aggregation weight
//! solver, metrics and full simulation runs.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dfl_dds_core::aggregation::{self, AggregationError, Solution};
use dfl_dds_core::data::TargetVector;
use dfl_dds_core::metrics;
use dfl_dds_core::road_network;
use dfl_dds_core::sim;
use dfl_dds_core::state_diversity::{self, StateVector};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "RoadGraph", module = "dfl_dds", frozen)]
struct PyRoadGraph {
    inner: road_network::RoadGraph,
}

#[pymethods]
impl PyRoadGraph {
    #[staticmethod]
    fn grid(rows: usize, cols: usize, spacing: f64) -> PyResult<Self> {
        Ok(Self { inner: road_network::gen_grid(rows, cols, spacing).map_err(value_err)? })
    }

    #[staticmethod]
    fn spider(arms: usize, circles: usize, radius_increment: f64) -> PyResult<Self> {
        Ok(Self { inner: road_network::gen_spider(arms, circles, radius_increment).map_err(value_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (nodes, min_length=100.0, max_length=200.0, seed=0))]
    fn random(nodes: usize, min_length: f64, max_length: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: road_network::gen_random(nodes, min_length, max_length, seed).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: road_network::RoadGraph::from_json(text).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    fn degree_histogram(&self) -> std::collections::BTreeMap<usize, usize> {
        road_network::degree_histogram(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("RoadGraph(nodes={}, edges={})", self.inner.node_count(), self.inner.edge_count())
    }
}

fn state(values: Vec<f64>) -> PyResult<StateVector> {
    StateVector::from_values(values).map_err(value_err)
}

fn target(g: Vec<f64>) -> PyResult<TargetVector> {
    TargetVector::from_probabilities(g).map_err(value_err)
}

#[pyfunction]
fn entropy(s: Vec<f64>) -> PyResult<f64> {
    Ok(state_diversity::entropy(&state(s)?))
}

#[pyfunction]
fn kl_divergence(s: Vec<f64>, g: Vec<f64>) -> PyResult<f64> {
    state_diversity::kl_divergence(&state(s)?, &target(g)?).map_err(value_err)
}

#[pyfunction]
fn local_increment(s: Vec<f64>, vehicle: usize, rate: f64) -> PyResult<Vec<f64>> {
    Ok(state_diversity::local_increment(&state(s)?, vehicle, rate).map_err(value_err)?.values().to_vec())
}

#[pyfunction]
fn normalize(s: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(state_diversity::normalize(&state(s)?).map_err(value_err)?.values().to_vec())
}

#[pyfunction]
fn mix(states: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Vec<f64>> {
    let states: Vec<StateVector> = states.into_iter().map(state).collect::<PyResult<_>>()?;
    let refs: Vec<&StateVector> = states.iter().collect();
    Ok(state_diversity::mix(&refs, &weights).map_err(value_err)?.values().to_vec())
}

fn solution_dict<'py>(py: Python<'py>, sol: &Solution, converged: bool) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("weights", sol.alpha.clone())?;
    d.set_item("objective", sol.objective)?;
    d.set_item("gap", sol.gap)?;
    d.set_item("iterations", sol.iterations)?;
    d.set_item("converged", converged)?;
    Ok(d)
}

/// Weights over `states` minimizing the KL divergence of their mix from `g`.
/// Returns a dict; `converged` is false when the iteration cap was hit.
#[pyfunction]
#[pyo3(signature = (states, g, tol=aggregation::DEFAULT_SOLVER_TOL, max_iter=aggregation::DEFAULT_SOLVER_MAX_ITER))]
fn solve_weights<'py>(py: Python<'py>, states: Vec<Vec<f64>>, g: Vec<f64>, tol: f64, max_iter: usize) -> PyResult<Bound<'py, PyDict>> {
    let states: Vec<StateVector> = states.into_iter().map(state).collect::<PyResult<_>>()?;
    let refs: Vec<&StateVector> = states.iter().collect();
    match aggregation::solve_weights(&refs, &target(g)?, tol, max_iter) {
        Ok(sol) => solution_dict(py, &sol, true),
        Err(AggregationError::NotConverged { best }) => solution_dict(py, &best, false),
        Err(e) => Err(value_err(e)),
    }
}

#[pyfunction]
#[pyo3(signature = (states, g, grid_step=1e-2))]
fn brute_force_weights<'py>(py: Python<'py>, states: Vec<Vec<f64>>, g: Vec<f64>, grid_step: f64) -> PyResult<Bound<'py, PyDict>> {
    let states: Vec<StateVector> = states.into_iter().map(state).collect::<PyResult<_>>()?;
    let refs: Vec<&StateVector> = states.iter().collect();
    let sol = aggregation::brute_force_weights(&refs, &target(g)?, grid_step).map_err(value_err)?;
    solution_dict(py, &sol, true)
}

#[pyfunction]
fn dfl_weights(sizes: Vec<usize>) -> PyResult<Vec<f64>> {
    aggregation::dfl_weights(&sizes).map_err(value_err)
}

#[pyfunction]
fn consensus_distance(models: Vec<Vec<f64>>) -> PyResult<f64> {
    let first = models.first().ok_or_else(|| PyValueError::new_err("empty fleet"))?;
    if models.iter().any(|m| m.len() != first.len()) {
        return Err(PyValueError::new_err("models have different lengths"));
    }
    let params: Vec<_> = models
        .iter()
        .map(|w| dfl_dds_core::learner::ModelParams {
            arch: dfl_dds_core::learner::Arch::Logistic,
            dim: w.len().saturating_sub(1),
            classes: 1,
            w: w.clone(),
        })
        .collect();
    metrics::consensus_distance(&params.iter().collect::<Vec<_>>()).map_err(value_err)
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> Option<f64> {
    metrics::pearson(&x, &y)
}

#[pyfunction]
fn epochs_to_target(series: Vec<f64>, target: f64) -> Option<usize> {
    metrics::epochs_to_target(&series, target)
}

/// Experiment configuration parsed from the JSON config format.
#[pyclass(name = "SimConfig", module = "dfl_dds")]
struct PySimConfig {
    inner: sim::SimConfig,
}

#[pymethods]
impl PySimConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: sim::SimConfig::from_json_str(text).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: sim::load_config(path).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.name()
    }

    #[setter]
    fn set_strategy(&mut self, name: &str) -> PyResult<()> {
        self.inner.strategy = name.parse().map_err(PyValueError::new_err)?;
        Ok(())
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) -> PyResult<()> {
        if epochs == 0 {
            return Err(PyValueError::new_err("epochs must be positive"));
        }
        self.inner.epochs = epochs;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("SimConfig(strategy={:?}, K={}, epochs={}, seed={})", self.inner.strategy.name(), self.inner.k, self.inner.epochs, self.inner.seed)
    }
}

#[pyclass(name = "EpochMetrics", module = "dfl_dds", frozen, get_all)]
struct PyEpochMetrics {
    epoch: usize,
    avg_accuracy: f64,
    consensus_distance: f64,
    pearson_acc_entropy: Option<f64>,
    per_vehicle_accuracy: Vec<f64>,
    per_vehicle_entropy: Vec<f64>,
    per_vehicle_kl: Vec<f64>,
}

#[pyclass(name = "MetricsLog", module = "dfl_dds", frozen)]
struct PyMetricsLog {
    inner: sim::MetricsLog,
}

#[pymethods]
impl PyMetricsLog {
    fn __len__(&self) -> usize {
        self.inner.epochs.len()
    }

    #[getter]
    fn config_hash(&self) -> u64 {
        self.inner.config_hash
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.name()
    }

    fn epochs(&self) -> Vec<PyEpochMetrics> {
        self.inner
            .epochs
            .iter()
            .map(|m| PyEpochMetrics {
                epoch: m.epoch,
                avg_accuracy: m.avg_accuracy,
                consensus_distance: m.consensus_distance,
                pearson_acc_entropy: m.pearson_acc_entropy(),
                per_vehicle_accuracy: m.per_vehicle_accuracy.clone(),
                per_vehicle_entropy: m.per_vehicle_entropy.clone(),
                per_vehicle_kl: m.per_vehicle_kl.clone(),
            })
            .collect()
    }

    fn avg_accuracy(&self) -> Vec<f64> {
        self.inner.avg_accuracy_series()
    }

    #[pyo3(signature = (wide=false))]
    fn to_csv(&self, wide: bool) -> PyResult<String> {
        let mut buf = Vec::new();
        sim::write_metrics(&self.inner, &mut buf, wide).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[pyo3(signature = (path, wide=false))]
    fn write_csv(&self, path: &str, wide: bool) -> PyResult<()> {
        sim::write_metrics_csv(&self.inner, path, wide).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Run a full experiment. The GIL is released while the simulation runs.
#[pyfunction]
fn run(py: Python<'_>, config: &PySimConfig) -> PyResult<PyMetricsLog> {
    let cfg = config.inner.clone();
    let log = py.detach(move || sim::run(&cfg)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyMetricsLog { inner: log })
}

#[pymodule]
fn dfl_dds(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRoadGraph>()?;
    m.add_class::<PySimConfig>()?;
    m.add_class::<PyEpochMetrics>()?;
    m.add_class::<PyMetricsLog>()?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(local_increment, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(mix, m)?)?;
    m.add_function(wrap_pyfunction!(solve_weights, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_weights, m)?)?;
    m.add_function(wrap_pyfunction!(dfl_weights, m)?)?;
    m.add_function(wrap_pyfunction!(consensus_distance, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(epochs_to_target, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
