//! Python bindings: configs, experiments, step-wise simulations,
//! compressors and the parameter recipes.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedcc_core::algorithms::{scafcom_theory_params, scallion_theory_params, ProblemScale, TheoryParams};
use fedcc_core::compress::{self, CompressorSpec, Partition};
use fedcc_core::config::ExperimentConfig;
use fedcc_core::harness::{self, RoundRecord};
use fedcc_core::rng::{Purpose, RngStream};
use fedcc_core::Error;

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err.root() {
        Error::Ingestion { .. } | Error::Io { .. } => PyOSError::new_err(msg),
        Error::Diverged { .. } => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn record_dict<'py>(py: Python<'py>, r: &RoundRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", r.round)?;
    d.set_item("grad_norm_sq", r.grad_norm_sq)?;
    d.set_item("train_loss", r.train_loss)?;
    d.set_item("test_acc", r.test_accuracy)?;
    d.set_item("uplink_bytes_cum", r.uplink_bytes_cum)?;
    d.set_item("downlink_bytes_cum", r.downlink_bytes_cum)?;
    d.set_item("participants", r.participants.clone())?;
    d.set_item("eval_samples", r.eval_samples)?;
    d.set_item("diverged", r.diverged)?;
    Ok(d)
}

/// A fully resolved experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml(text)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn from_path(path: &str) -> PyResult<Self> {
        ExperimentConfig::from_path(path)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    #[getter]
    fn algorithm(&self) -> String {
        self.inner.algorithm.label()
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
    fn rounds(&self) -> usize {
        self.inner.hyper.rounds
    }

    #[setter]
    fn set_rounds(&mut self, rounds: usize) {
        self.inner.hyper.rounds = rounds;
    }

    #[getter]
    fn eta_l(&self) -> f64 {
        self.inner.hyper.eta_l
    }

    #[setter]
    fn set_eta_l(&mut self, v: f64) {
        self.inner.hyper.eta_l = v;
    }

    #[getter]
    fn eta_g(&self) -> f64 {
        self.inner.hyper.eta_g
    }

    #[setter]
    fn set_eta_g(&mut self, v: f64) {
        self.inner.hyper.eta_g = v;
    }

    #[getter]
    fn parallel(&self) -> bool {
        self.inner.parallel
    }

    #[setter]
    fn set_parallel(&mut self, v: bool) {
        self.inner.parallel = v;
    }

    #[getter]
    fn output(&self) -> Option<String> {
        self.inner.output.as_ref().map(|p| p.display().to_string())
    }

    #[setter]
    fn set_output(&mut self, path: Option<String>) {
        self.inner.output = path.map(Into::into);
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(algorithm={:?}, rounds={}, seed={})",
            self.inner.algorithm.label(),
            self.inner.hyper.rounds,
            self.inner.seed
        )
    }
}

/// Result of a full run.
#[pyclass(name = "Trajectory")]
struct PyTrajectory {
    inner: harness::Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn algo(&self) -> String {
        self.inner.algo.clone()
    }

    #[getter]
    fn diverged_at(&self) -> Option<usize> {
        self.inner.diverged_at
    }

    #[getter]
    fn final_x(&self) -> Vec<f64> {
        self.inner.final_server.x.clone()
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner.records.iter().map(|r| record_dict(py, r)).collect()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }
}

/// Round-by-round driver built from a config.
#[pyclass(name = "Simulation")]
struct PySimulation {
    inner: harness::Simulation,
    subsample: Option<usize>,
}

#[pymethods]
impl PySimulation {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let c = &config.inner;
        c.validate().map_err(to_py)?;
        let problem = harness::build_problem(&c.problem, c.seed).map_err(to_py)?;
        let hyper = harness::effective_hyper(c, &problem).map_err(to_py)?;
        let inner = harness::Simulation::new(problem, c.algorithm.clone(), hyper, c.seed, c.control_init)
            .map_err(to_py)?
            .with_parallel(c.parallel);
        Ok(Self {
            inner,
            subsample: c.eval_subsample,
        })
    }

    /// Runs one round; returns participants, per-client bytes and payload norms.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let rep = self.inner.step().map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("round", rep.round)?;
        d.set_item("participants", rep.participants.clone())?;
        d.set_item(
            "bytes",
            rep.clients.iter().map(|c| c.bytes).collect::<Vec<_>>(),
        )?;
        d.set_item(
            "payload_norms",
            rep.clients.iter().map(|c| c.payload_norm).collect::<Vec<_>>(),
        )?;
        d.set_item("uplink_bytes", rep.uplink_bytes)?;
        d.set_item("downlink_bytes", rep.downlink_bytes)?;
        Ok(d)
    }

    fn evaluate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.evaluate(self.subsample).map_err(to_py)?;
        record_dict(py, &r)
    }

    #[getter]
    fn round(&self) -> usize {
        self.inner.round()
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.server().x.clone()
    }

    #[getter]
    fn global_control(&self) -> Vec<f64> {
        self.inner.server().c.clone()
    }

    fn client_control(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .client_states()
            .get(i)
            .map(|s| s.c.clone())
            .ok_or_else(|| PyValueError::new_err(format!("no client state {i}")))
    }

    #[getter]
    fn uplink_bytes(&self) -> u64 {
        self.inner.uplink_bytes()
    }
}

/// A compression operator.
#[pyclass(name = "Compressor")]
struct PyCompressor {
    inner: CompressorSpec,
}

#[pymethods]
impl PyCompressor {
    /// `kind` is one of identity, random-sparsify, random-dither, top-r,
    /// grouped-sign; grouped-sign needs `groups` and `dim`.
    #[new]
    #[pyo3(signature = (kind, s=None, bits=None, r=None, groups=None, dim=None, scaled=false))]
    fn new(
        kind: &str,
        s: Option<usize>,
        bits: Option<u32>,
        r: Option<f64>,
        groups: Option<usize>,
        dim: Option<usize>,
        scaled: bool,
    ) -> PyResult<Self> {
        let missing = |what: &str| PyValueError::new_err(format!("{kind} needs `{what}`"));
        let spec = match kind {
            "identity" => CompressorSpec::Identity,
            "random-sparsify" => CompressorSpec::RandomSparsify {
                s: s.ok_or_else(|| missing("s"))?,
            },
            "random-dither" => CompressorSpec::RandomDither {
                bits: bits.ok_or_else(|| missing("bits"))?,
            },
            "top-r" => CompressorSpec::TopR {
                r: r.ok_or_else(|| missing("r"))?,
            },
            "grouped-sign" => CompressorSpec::GroupedSign {
                partition: Partition::contiguous(
                    dim.ok_or_else(|| missing("dim"))?,
                    groups.ok_or_else(|| missing("groups"))?,
                )
                .map_err(to_py)?,
            },
            other => return Err(PyValueError::new_err(format!("unknown compressor {other:?}"))),
        };
        let inner = if scaled { CompressorSpec::scaled(spec) } else { spec };
        if let Some(d) = dim {
            inner.validate(d).map_err(to_py)?;
        }
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name()
    }

    #[getter]
    fn unbiased(&self) -> bool {
        self.inner.is_unbiased()
    }

    #[getter]
    fn contractive(&self) -> bool {
        self.inner.is_contractive()
    }

    fn omega(&self, dim: usize) -> PyResult<f64> {
        compress::omega(&self.inner, dim).map_err(to_py)
    }

    fn q2(&self, dim: usize) -> PyResult<f64> {
        compress::contraction_q2(&self.inner, dim).map_err(to_py)
    }

    /// Decoded output and encoded size in bytes, drawing from the
    /// compression stream of `(seed, round, client)`.
    #[pyo3(signature = (x, seed=0, round=0, client=0))]
    fn apply(&self, x: Vec<f64>, seed: u64, round: u64, client: u64) -> PyResult<(Vec<f64>, usize)> {
        let mut rng = RngStream::new(seed, round, client, Purpose::Compression);
        let msg = compress::compress(&self.inner, &x, &mut rng).map_err(to_py)?;
        Ok((msg.decode().map_err(to_py)?, msg.encoded_bytes()))
    }

    /// Monte Carlo report against the operator's defining inequality.
    #[pyo3(signature = (dim, trials, seed=0))]
    fn check<'py>(&self, py: Python<'py>, dim: usize, trials: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let mut rng = RngStream::from_seed(seed);
        let d = PyDict::new(py);
        if self.inner.is_unbiased() {
            let rep = compress::validate_unbiased(&self.inner, dim, trials, &mut rng).map_err(to_py)?;
            d.set_item("omega", rep.omega)?;
            d.set_item("mean_error", rep.mean_error)?;
            d.set_item("worst_band_fraction", rep.worst_band_fraction)?;
            d.set_item("variance_ratio", rep.variance_ratio)?;
            d.set_item("variance_bound", rep.variance_bound)?;
            d.set_item("passed", rep.passed())?;
        } else {
            let rep = compress::validate_contractive(&self.inner, dim, trials, &mut rng).map_err(to_py)?;
            d.set_item("q2", rep.q2)?;
            d.set_item("max_ratio", rep.max_ratio)?;
            d.set_item("mean_ratio", rep.mean_ratio)?;
            d.set_item("bound", rep.bound)?;
            d.set_item("passed", rep.passed)?;
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Compressor({:?})", self.inner.name())
    }
}

#[pyfunction]
fn run_experiment(config: &PyConfig) -> PyResult<PyTrajectory> {
    harness::run_experiment(&config.inner)
        .map(|inner| PyTrajectory { inner })
        .map_err(to_py)
}

/// Aligned comparison table as CSV text.
#[pyfunction]
fn compare_runs(configs: Vec<PyConfig>) -> PyResult<String> {
    let configs: Vec<ExperimentConfig> = configs.into_iter().map(|c| c.inner).collect();
    harness::compare_runs(&configs)
        .map(|c| c.to_csv())
        .map_err(to_py)
}

/// Returns `(best config or None, grid table as CSV text)`.
#[pyfunction]
fn grid_search(config: &PyConfig, eta_g: Vec<f64>, eta_l: Vec<f64>) -> PyResult<(Option<PyConfig>, String)> {
    let g = harness::grid_search(&config.inner, &eta_g, &eta_l, harness::Selection::Auto).map_err(to_py)?;
    Ok((g.best_config.clone().map(|inner| PyConfig { inner }), g.to_csv()))
}

#[pyfunction]
#[pyo3(signature = (clients, sampled, seed, round=0))]
fn sample_clients(clients: usize, sampled: usize, seed: u64, round: u64) -> PyResult<Vec<usize>> {
    let mut rng = RngStream::new(seed, round, fedcc_core::rng::SERVER, Purpose::Sampling);
    harness::sample_clients(clients, sampled, &mut rng).map_err(to_py)
}

fn theory_dict<'py>(py: Python<'py>, t: TheoryParams) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("local_rate_kl_bound", t.local_rate_kl_bound)?;
    d.set_item("global_step_kl", t.global_step_kl)?;
    d.set_item("factor", t.factor)?;
    Ok(d)
}

#[allow(clippy::too_many_arguments)]
fn scale(smoothness: f64, delta: f64, sigma: f64, clients: usize, sampled: usize, local_steps: usize, rounds: usize) -> ProblemScale {
    ProblemScale {
        smoothness,
        delta,
        sigma,
        clients,
        sampled,
        local_steps,
        rounds,
    }
}

/// SCALLION recipe: `α`, the bound on `η_l K L` and `η_g η_l K L`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn scallion_params<'py>(
    py: Python<'py>,
    smoothness: f64,
    delta: f64,
    sigma: f64,
    clients: usize,
    sampled: usize,
    local_steps: usize,
    rounds: usize,
    omega: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = scale(smoothness, delta, sigma, clients, sampled, local_steps, rounds);
    theory_dict(py, scallion_theory_params(&p, omega).map_err(to_py)?)
}

/// SCAFCOM recipe: `β`, the bound on `η_l K L` and `η_g η_l K L`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn scafcom_params<'py>(
    py: Python<'py>,
    smoothness: f64,
    delta: f64,
    sigma: f64,
    clients: usize,
    sampled: usize,
    local_steps: usize,
    rounds: usize,
    q: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = scale(smoothness, delta, sigma, clients, sampled, local_steps, rounds);
    theory_dict(py, scafcom_theory_params(&p, q).map_err(to_py)?)
}

#[pymodule]
fn fedcc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PySimulation>()?;
    m.add_class::<PyCompressor>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(compare_runs, m)?)?;
    m.add_function(wrap_pyfunction!(grid_search, m)?)?;
    m.add_function(wrap_pyfunction!(sample_clients, m)?)?;
    m.add_function(wrap_pyfunction!(scallion_params, m)?)?;
    m.add_function(wrap_pyfunction!(scafcom_params, m)?)?;
    m.add("CSV_HEADER", harness::CSV_HEADER)?;
    Ok(())
}
