//! Python bindings for `ringveil`.

use num_bigint::BigUint;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use ringveil::adversary::{build_view, distinguish_schedules, AdversaryConfig};
use ringveil::crypto;
use ringveil::protocol::owner_verify_execution;
use ringveil::schedule::{self, PartialOrder};
use ringveil::simnet::{SimConfig, Simulation, Topology, TraceLog};
use ringveil::token;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "PuzzleParams", module = "ringveil_py", frozen)]
struct PyPuzzleParams {
    inner: crypto::PuzzleParams,
}

#[pymethods]
impl PyPuzzleParams {
    #[staticmethod]
    #[pyo3(signature = (bits, seed = 0))]
    fn generate(bits: u64, seed: u64) -> PyResult<Self> {
        crypto::gen_params(bits, seed).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn from_primes(p: BigUint, q: BigUint) -> PyResult<Self> {
        crypto::PuzzleParams::from_primes(p, q).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn n(&self) -> BigUint {
        self.inner.n.clone()
    }

    #[getter]
    fn phi(&self) -> BigUint {
        self.inner.phi.clone()
    }

    #[getter]
    fn bit_length(&self) -> u64 {
        self.inner.bit_length
    }

    fn __repr__(&self) -> String {
        format!("PuzzleParams(bits={}, n={})", self.inner.bit_length, self.inner.n)
    }
}

#[pyclass(name = "Puzzle", module = "ringveil_py", frozen)]
struct PyPuzzle {
    inner: crypto::Puzzle,
}

#[pymethods]
impl PyPuzzle {
    #[staticmethod]
    #[pyo3(signature = (params, a, t_hat, command, key, t_val = 0))]
    fn create(params: &PyPuzzleParams, a: BigUint, t_hat: u64, command: &[u8], key: BigUint, t_val: u64) -> PyResult<Self> {
        crypto::puzzle_create(&params.inner, &a, t_hat, command, &key, t_val)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        crypto::Puzzle::from_bytes(data).map(|inner| Self { inner }).map_err(value_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[getter]
    fn n(&self) -> BigUint {
        self.inner.n.clone()
    }

    #[getter]
    fn a(&self) -> BigUint {
        self.inner.a.clone()
    }

    #[getter]
    fn t_hat(&self) -> u64 {
        self.inner.t_hat
    }

    #[getter]
    fn e_k(&self) -> BigUint {
        self.inner.e_k.clone()
    }

    #[getter]
    fn t_val(&self) -> u64 {
        self.inner.t_val
    }

    /// Returns `(key, command, squarings, value)`.
    fn solve<'py>(&self, py: Python<'py>) -> PyResult<(BigUint, Bound<'py, PyBytes>, u64, BigUint)> {
        let inner = self.inner.clone();
        let sol = py.detach(move || crypto::puzzle_solve(&inner)).map_err(value_err)?;
        Ok((sol.key, PyBytes::new(py, &sol.command), sol.squarings_performed, sol.value))
    }

    fn fast_eval(&self, phi: BigUint) -> BigUint {
        crypto::puzzle_fast_eval(&self.inner, &phi)
    }

    fn __repr__(&self) -> String {
        format!("Puzzle(t_hat={}, n={})", self.inner.t_hat, self.inner.n)
    }
}

/// Lexicographically smallest linear extension of the order on `devices`.
#[pyfunction]
fn linear_extension(devices: Vec<u32>, pairs: Vec<(u32, u32)>) -> PyResult<Vec<u32>> {
    let order = PartialOrder::new(devices, &pairs);
    schedule::linear_extension(&order).map(|v| v.into_iter().map(|d| d.0).collect()).map_err(value_err)
}

#[pyfunction]
fn slots_required(n: usize, k: usize) -> usize {
    schedule::slots_required(n, k)
}

#[pyfunction]
fn data_overwrite<'py>(py: Python<'py>, random_bits: &[u8], generated_bits: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let out = token::data_overwrite(random_bits, generated_bits).map_err(value_err)?;
    Ok(PyBytes::new(py, &out))
}

#[pyfunction]
fn data_recover<'py>(py: Python<'py>, overwritten: &[u8], random_bits: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let out = token::data_recover(overwritten, random_bits).map_err(value_err)?;
    Ok(PyBytes::new(py, &out))
}

/// Runs the simulator and returns a dict with `trace_csv`, `events`,
/// latency statistics and, when a schedule is given, `verified`.
#[pyfunction]
#[pyo3(signature = (devices = 3, virtual_devices = None, rounds = 10, mode = "ring", seed = 0, jitter = 0, modulus_bits = 128, schedule = None))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    devices: usize,
    virtual_devices: Option<usize>,
    rounds: u32,
    mode: &str,
    seed: u64,
    jitter: u64,
    modulus_bits: u64,
    schedule: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let topology: Topology = mode.parse().map_err(PyValueError::new_err)?;
    let order = schedule.map(PartialOrder::parse).transpose().map_err(value_err)?;
    let cfg = SimConfig {
        n_physical: devices,
        n_virtual: virtual_devices.unwrap_or(devices),
        topology,
        rounds,
        seed,
        jitter,
        modulus_bits,
        ..SimConfig::default()
    };
    let (out, verified) = py
        .detach(move || -> Result<_, ringveil::simnet::SimError> {
            let mut sim = Simulation::new(cfg)?;
            let plan = match &order {
                Some(o) if !o.is_empty() => {
                    sim.chain(o)?;
                    Some(sim.compile(o, 0, 0)?)
                }
                _ => None,
            };
            let out = sim.run(plan.as_ref(), &[])?;
            let verified = plan.as_ref().map(|p| owner_verify_execution(&out.reports, &sim.params, p));
            Ok((out, verified))
        })
        .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("trace_csv", out.trace.to_csv_string())?;
    d.set_item("events", out.events_text())?;
    d.set_item("rounds_completed", out.stats.rounds_completed)?;
    d.set_item("round_latencies", out.stats.round_latencies.clone())?;
    d.set_item("mean_latency_us", out.stats.mean_latency_us)?;
    d.set_item("var_latency_us", out.stats.var_latency_us)?;
    d.set_item("mean_token_bytes", out.stats.mean_token_bytes)?;
    d.set_item("reports", out.reports.len())?;
    d.set_item("verified", verified)?;
    Ok(d)
}

/// Compares two trace CSVs; returns `(distinguishable, report_text)`.
#[pyfunction]
#[pyo3(signature = (trace_a, trace_b, significance = 0.01))]
fn distinguish(trace_a: &str, trace_b: &str, significance: f64) -> PyResult<(bool, String)> {
    let a = TraceLog::read_csv(trace_a.as_bytes()).map_err(value_err)?;
    let b = TraceLog::read_csv(trace_b.as_bytes()).map_err(value_err)?;
    let cfg = AdversaryConfig { significance, ..AdversaryConfig::default() };
    let report = distinguish_schedules(&build_view(&a), &build_view(&b), &cfg).map_err(value_err)?;
    Ok((report.distinguishable(), report.to_text()))
}

#[pymodule]
fn ringveil_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPuzzleParams>()?;
    m.add_class::<PyPuzzle>()?;
    m.add_function(wrap_pyfunction!(linear_extension, m)?)?;
    m.add_function(wrap_pyfunction!(slots_required, m)?)?;
    m.add_function(wrap_pyfunction!(data_overwrite, m)?)?;
    m.add_function(wrap_pyfunction!(data_recover, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(distinguish, m)?)?;
    Ok(())
}
