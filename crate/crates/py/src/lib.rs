//! Python bindings: basis sampling, projection, budget allocation and
//! experiment runs.

use std::path::PathBuf;

use pyo3::exceptions::{PyFloatingPointError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use ferret_core::bench::{self, config::ExperimentConfig};
use ferret_core::error::FerretError;
use ferret_core::federation::{Federation, RoundRecord};
use ferret_core::rand_basis::{self as rb, RandomSeed};
use ferret_core::subspace;
use ferret_core::wire::{self, Payload};

fn err(e: FerretError) -> PyErr {
    let msg = e.to_string();
    if e.is_divergence() {
        return PyFloatingPointError::new_err(msg);
    }
    match e.root_cause() {
        FerretError::Config(_)
        | FerretError::InvalidDimension(_)
        | FerretError::Shape { .. }
        | FerretError::Protocol(_)
        | FerretError::Numeric { .. }
        | FerretError::InfeasibleBudget { .. }
        | FerretError::Partition(_) => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

#[pyclass(name = "TruncGaussStats", module = "ferret", frozen)]
struct PyTruncGaussStats(rb::TruncGaussStats);

#[pymethods]
impl PyTruncGaussStats {
    #[getter]
    fn dim(&self) -> u64 {
        self.0.dim
    }

    #[getter]
    fn bound(&self) -> f64 {
        self.0.bound
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.0.rho
    }

    #[getter]
    fn mass(&self) -> f64 {
        self.0.mass
    }

    fn __repr__(&self) -> String {
        format!("TruncGaussStats(dim={}, rho={:e})", self.0.dim, self.0.rho)
    }
}

#[pyclass(name = "BlockPartition", module = "ferret", frozen)]
#[derive(Clone)]
struct PyBlockPartition(subspace::BlockPartition);

#[pymethods]
impl PyBlockPartition {
    #[new]
    fn new(block_dims: Vec<usize>, block_budgets: Vec<usize>) -> PyResult<Self> {
        subspace::BlockPartition::new(block_dims, block_budgets).map(Self).map_err(err)
    }

    /// Blocks of the given sizes with `total` bases split evenly.
    #[staticmethod]
    fn uniform(block_dims: Vec<usize>, total: usize) -> PyResult<Self> {
        subspace::BlockPartition::uniform(block_dims, total).map(Self).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.0.num_blocks()
    }

    #[getter]
    fn block_dims(&self) -> Vec<usize> {
        self.0.block_dims().to_vec()
    }

    #[getter]
    fn block_budgets(&self) -> Vec<usize> {
        self.0.block_budgets().to_vec()
    }

    #[getter]
    fn id(&self) -> u32 {
        self.0.id()
    }

    fn __repr__(&self) -> String {
        format!(
            "BlockPartition(block_dims={:?}, block_budgets={:?})",
            self.0.block_dims(),
            self.0.block_budgets()
        )
    }
}

#[pyclass(name = "ProjectedUpdate", module = "ferret", frozen)]
struct PyProjectedUpdate(subspace::ProjectedUpdate);

#[pymethods]
impl PyProjectedUpdate {
    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed.0
    }

    #[getter]
    fn partition_id(&self) -> u32 {
        self.0.partition_id
    }

    #[getter]
    fn coords(&self) -> Vec<Vec<f32>> {
        self.0.coords.clone()
    }

    /// Transmitted numbers, the seed included.
    #[getter]
    fn numeric_units(&self) -> u64 {
        self.0.numeric_units()
    }

    /// Wire encoding: payload tag followed by the payload body.
    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        let bytes = wire::encode_tagged_payload(&Payload::Projected(self.0.clone()));
        PyBytes::new(py, &bytes)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        match wire::decode_tagged_payload(data).map_err(err)? {
            Payload::Projected(p) => Ok(Self(p)),
            other => Err(PyValueError::new_err(format!(
                "expected a projected update, got payload tag {:#04x}",
                other.tag()
            ))),
        }
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

#[pyfunction]
fn derive_subseed(root: u64, client: u64, round: u64, block: u64, basis_index: u64) -> u64 {
    rb::derive_subseed(RandomSeed(root), client, round, block, basis_index).0
}

#[pyfunction]
fn trunc_gauss_stats(dim: u64) -> PyResult<PyTruncGaussStats> {
    rb::trunc_gauss_stats(dim).map(PyTruncGaussStats).map_err(err)
}

/// Basis vector `basis_index` of `block`, as f32 values widened to float.
#[pyfunction]
fn sample_basis(seed: u64, block: u32, block_dim: usize, basis_index: u32) -> PyResult<Vec<f32>> {
    rb::sample_basis(RandomSeed(seed), block, block_dim, basis_index)
        .map(|c| c.values)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (update, partition, seed, exact = false))]
fn project(
    py: Python<'_>,
    update: Vec<f64>,
    partition: &PyBlockPartition,
    seed: u64,
    exact: bool,
) -> PyResult<PyProjectedUpdate> {
    let p = &partition.0;
    py.detach(|| {
        if exact {
            subspace::exact_project(&update, p, RandomSeed(seed))
        } else {
            subspace::project_par(&update, p, RandomSeed(seed))
        }
    })
    .map(PyProjectedUpdate)
    .map_err(err)
}

#[pyfunction]
fn reconstruct(py: Python<'_>, update: &PyProjectedUpdate, partition: &PyBlockPartition) -> PyResult<Vec<f64>> {
    py.detach(|| subspace::reconstruct_par(&update.0, &partition.0)).map_err(err)
}

/// Per-block budgets proportional to `sqrt(norm / rho)`, each between 1 and
/// the block size, summing to `total`.
#[pyfunction]
fn allocate_budgets(block_norms: Vec<f64>, block_dims: Vec<usize>, total: usize) -> PyResult<Vec<usize>> {
    let stats = block_dims
        .iter()
        .map(|&d| rb::trunc_gauss_stats(d as u64))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    subspace::allocate_budgets(&block_norms, &stats, total).map_err(err)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> f64 {
    subspace::cosine_similarity(&a, &b)
}

fn record_dict<'py>(py: Python<'py>, r: &RoundRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", r.round)?;
    d.set_item("loss", r.loss)?;
    d.set_item("metric", r.metric)?;
    d.set_item("cumulative_upload", r.cumulative_upload)?;
    d.set_item("cumulative_grad_evals", r.cumulative_grad_evals)?;
    d.set_item("local_seconds", r.local_seconds)?;
    d.set_item("aggregate_seconds", r.aggregate_seconds)?;
    d.set_item("cumulative_download", r.cumulative_download)?;
    Ok(d)
}

/// A federation built from an experiment file, stepped from Python.
#[pyclass(name = "Experiment", module = "ferret")]
struct PyExperiment {
    fed: Federation,
    records: Vec<RoundRecord>,
}

#[pymethods]
impl PyExperiment {
    /// Parses experiment TOML. Data paths resolve against the current
    /// directory.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let cfg = ExperimentConfig::parse(text).map_err(err)?;
        Self::build(&cfg)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let cfg = ExperimentConfig::load(&path).map_err(err)?;
        Self::build(&cfg)
    }

    #[getter]
    fn round(&self) -> usize {
        self.fed.round()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.fed.dim()
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.fed.config().method.name()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.fed.weights().to_vec()
    }

    /// Runs one round and returns its record.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let fed = &mut self.fed;
        let r = py.detach(|| fed.step()).map_err(err)?;
        self.records.push(r.clone());
        record_dict(py, &r)
    }

    /// Runs the remaining rounds and returns every record so far.
    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let fed = &mut self.fed;
        let rest = py.detach(|| fed.run()).map_err(err)?;
        self.records.extend(rest);
        self.records.iter().map(|r| record_dict(py, r)).collect()
    }

    /// Cost summary of the rounds run so far, as in `summary.json`.
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = bench::summarize(&self.fed, &self.records);
        let json = serde_json::to_string(&s).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let loads = py.import("json")?.getattr("loads")?;
        Ok(loads.call1((json,))?.cast_into::<PyDict>()?)
    }
}

impl PyExperiment {
    fn build(cfg: &ExperimentConfig) -> PyResult<Self> {
        let fed = bench::build_federation(cfg).map_err(err)?;
        Ok(Self { fed, records: vec![] })
    }
}

#[pymodule]
fn ferret(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTruncGaussStats>()?;
    m.add_class::<PyBlockPartition>()?;
    m.add_class::<PyProjectedUpdate>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(derive_subseed, m)?)?;
    m.add_function(wrap_pyfunction!(trunc_gauss_stats, m)?)?;
    m.add_function(wrap_pyfunction!(sample_basis, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(allocate_budgets, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    Ok(())
}
