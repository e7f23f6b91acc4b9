//! Python bindings for the beamsync simulator.

use std::f64::consts::PI;

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::{Map, Value};

use beamsync::analysis;
use beamsync::channel::{self, SystemConfig};
use beamsync::cli::{parse_config, scenario_to_json, CliError};
use beamsync::estimator::{FsBeam, UserBasis};
use beamsync::harness::{self, draw_realization, Engine, Scenario, Scheme};
use beamsync::numerics::ComplexMatrix;
use beamsync::signal::TrainingBlock;

fn config_err(e: CliError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn py_to_json(v: &Bound<'_, PyAny>) -> PyResult<Value> {
    if let Ok(b) = v.extract::<bool>() {
        return Ok(Value::Bool(b));
    }
    if let Ok(i) = v.extract::<i64>() {
        return Ok(Value::from(i));
    }
    if let Ok(f) = v.extract::<f64>() {
        return Ok(Value::from(f));
    }
    if let Ok(s) = v.extract::<String>() {
        return Ok(Value::String(s));
    }
    if let Ok(items) = v.extract::<Vec<Bound<'_, PyAny>>>() {
        return items.iter().map(py_to_json).collect::<PyResult<Vec<_>>>().map(Value::Array);
    }
    Err(PyValueError::new_err(format!("unsupported config value: {v}")))
}

fn to_matrix(rows: &[Vec<Complex64>]) -> PyResult<ComplexMatrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("expected a non-empty rectangular N x M matrix"));
    }
    Ok(ComplexMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn from_matrix(m: &ComplexMatrix) -> Vec<Vec<Complex64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Scenario configuration. Keyword names follow the config-file keys
/// (`n`, `m`, `k`, `l`, `theta_as`, `snr_db`, `doas`, `schemes`, ...).
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    scenario: Scenario,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=None, **kwargs))]
    fn new(text: Option<&str>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut map = match text {
            Some(t) if !t.trim().is_empty() => {
                let base = parse_config(t).map_err(config_err)?;
                match scenario_to_json(&base.scenario) {
                    Value::Object(m) => m,
                    _ => Map::new(),
                }
            }
            _ => Map::new(),
        };
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                map.insert(k.extract::<String>()?, py_to_json(&v)?);
            }
        }
        let scenario = parse_config(&Value::Object(map).to_string()).map_err(config_err)?.scenario;
        Ok(Self { scenario })
    }

    #[getter]
    fn subcarriers(&self) -> usize {
        self.scenario.cfg.subcarriers
    }
    #[getter]
    fn antennas(&self) -> usize {
        self.scenario.cfg.antennas
    }
    #[getter]
    fn users(&self) -> usize {
        self.scenario.cfg.users
    }
    #[getter]
    fn taps(&self) -> usize {
        self.scenario.cfg.taps
    }
    #[getter]
    fn angular_spread(&self) -> f64 {
        self.scenario.cfg.angular_spread
    }
    #[getter]
    fn phi_max(&self) -> f64 {
        self.scenario.cfg.phi_max
    }
    #[getter]
    fn snr_db(&self) -> f64 {
        self.scenario.cfg.snr_db
    }
    #[getter]
    fn iterations(&self) -> usize {
        self.scenario.cfg.iterations
    }
    #[getter]
    fn schemes(&self) -> Vec<String> {
        self.scenario.schemes.iter().map(|s| s.name().to_string()).collect()
    }

    fn noise_variance(&self) -> f64 {
        self.scenario.cfg.noise_variance()
    }

    /// Flat JSON accepted back by `Config(text)`.
    fn to_json(&self) -> String {
        scenario_to_json(&self.scenario).to_string()
    }

    fn __repr__(&self) -> String {
        let c = &self.scenario.cfg;
        format!("Config(N={}, M={}, K={}, L={}, snr_db={})", c.subcarriers, c.antennas, c.users, c.taps, c.snr_db)
    }
}

/// Single-user joint CFO/DOA estimator on a shared received block.
#[pyclass(name = "FsBeam")]
struct PyFsBeam {
    est: FsBeam,
    taps: usize,
}

#[pymethods]
impl PyFsBeam {
    #[new]
    fn new(config: &PyConfig) -> Self {
        Self { est: FsBeam::new(&config.scenario.cfg), taps: config.scenario.cfg.taps }
    }

    /// Returns `(phi_hat, theta_hat, bin)` for the user with training `x`.
    fn estimate(&self, y: Vec<Vec<Complex64>>, x: Vec<Complex64>) -> PyResult<(f64, f64, usize)> {
        let y = to_matrix(&y)?;
        if x.len() != y.nrows() {
            return Err(PyValueError::new_err("training length must equal the number of rows of y"));
        }
        let tb = TrainingBlock::new(x, self.taps);
        let basis = UserBasis::new(&tb.b).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let spec = self.est.spectrum(&y).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let e = self.est.estimate_user(&spec, &basis).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok((e.phi_hat, e.theta_hat, e.bin))
    }
}

fn parse_schemes(names: &[String]) -> PyResult<Vec<Scheme>> {
    names.iter().map(|s| s.parse::<Scheme>().map_err(PyValueError::new_err)).collect()
}

/// Monte Carlo run; returns one dict per metric row.
#[pyfunction]
#[pyo3(signature = (config, snr=None, trials=None, schemes=None, seed=None, threads=None, iterations=false))]
fn simulate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    snr: Option<Vec<f64>>,
    trials: Option<usize>,
    schemes: Option<Vec<String>>,
    seed: Option<u64>,
    threads: Option<usize>,
    iterations: bool,
) -> PyResult<Bound<'py, PyList>> {
    let mut sc = config.scenario.clone();
    if let Some(s) = snr {
        sc.snr_points = s;
    }
    if let Some(t) = trials {
        sc.trials = t;
    }
    if let Some(s) = schemes {
        sc.schemes = parse_schemes(&s)?;
    }
    let seed = seed.unwrap_or(sc.cfg.seed);
    let (table, _) = py
        .detach(|| harness::run_monte_carlo(&sc, seed, threads, iterations))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = PyList::empty(py);
    for r in &table.rows {
        let d = PyDict::new(py);
        d.set_item("scenario", &r.scenario)?;
        d.set_item("scheme", &r.scheme)?;
        d.set_item("snr_db", r.snr_db)?;
        d.set_item("metric", &r.metric)?;
        d.set_item("value", r.value)?;
        d.set_item("ci95", r.ci95)?;
        d.set_item("trials", r.trials)?;
        out.append(d)?;
    }
    Ok(out)
}

/// One paired trial; returns `{scheme: {...}}` plus the true CFOs.
#[pyfunction]
#[pyo3(signature = (config, snr_db, seed))]
fn run_trial<'py>(py: Python<'py>, config: &PyConfig, snr_db: f64, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let engine = Engine::new(config.scenario.clone()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let t = engine.run_trial(snr_db, seed, 0);
    let d = PyDict::new(py);
    d.set_item("true_phis", t.true_phis.clone())?;
    for (s, o) in &t.outcomes {
        let od = PyDict::new(py);
        od.set_item("phi_hat", o.phi_hat.clone())?;
        od.set_item("cfo_sq_err", o.cfo_sq_err.clone())?;
        od.set_item("symbol_errors", o.symbol_errors.clone())?;
        od.set_item("symbols_per_user", o.symbols_per_user)?;
        od.set_item("flags", o.flags.clone())?;
        d.set_item(s.name(), od)?;
    }
    Ok(d)
}

/// Received training block and per-user trainings for one seeded draw.
#[pyfunction]
#[pyo3(signature = (config, snr_db, seed))]
fn realization<'py>(py: Python<'py>, config: &PyConfig, snr_db: f64, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    use rand::SeedableRng;
    let sc = &config.scenario;
    sc.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let r = draw_realization(sc, sc.noise_variance(snr_db), &mut rng);
    let d = PyDict::new(py);
    d.set_item("y", from_matrix(&r.y_train))?;
    d.set_item("training", r.training.iter().map(|t| t.x.clone()).collect::<Vec<_>>())?;
    d.set_item("phis", r.users.iter().map(|u| u.phi).collect::<Vec<_>>())?;
    d.set_item("doas", r.users.iter().map(|u| u.theta_mean).collect::<Vec<_>>())?;
    d.set_item("checksum", r.checksum)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (theta, m, chi=PI))]
fn steering_vector(theta: f64, m: usize, chi: f64) -> Vec<Complex64> {
    channel::steering_vector(theta, m, chi).iter().copied().collect()
}

#[pyfunction]
#[pyo3(signature = (theta, theta_as, m, chi=PI))]
fn spatial_correlation(theta: f64, theta_as: f64, m: usize, chi: f64) -> Vec<Vec<Complex64>> {
    from_matrix(&channel::spatial_correlation(theta, theta_as, chi, m))
}

/// Mean closed-form CFO MSE over the users of a fixed-DOA config.
#[pyfunction]
#[pyo3(signature = (config, snr_db, draws=8, seed=0))]
fn theoretical_mse(config: &PyConfig, snr_db: f64, draws: usize, seed: u64) -> PyResult<f64> {
    harness::theoretical_cfo_mse(&config.scenario, snr_db, draws, seed).ok_or_else(|| PyValueError::new_err("needs fixed DOAs"))
}

#[pyfunction]
#[pyo3(signature = (snr_db, m, n, signal_power=1.0))]
fn asymptotic_mse(snr_db: f64, m: usize, n: usize, signal_power: f64) -> f64 {
    analysis::asymptotic_mse(signal_power, channel::noise_variance_for(signal_power, snr_db), m, n)
}

#[pyfunction]
fn scheme_names() -> Vec<&'static str> {
    Scheme::ALL.iter().map(|s| s.name()).collect()
}

#[pyfunction]
fn default_config_json() -> String {
    let sc = Scenario::new("default", SystemConfig::default());
    scenario_to_json(&sc).to_string()
}

#[pymodule]
pub fn beamsync_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyFsBeam>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(realization, m)?)?;
    m.add_function(wrap_pyfunction!(steering_vector, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_mse, m)?)?;
    m.add_function(wrap_pyfunction!(asymptotic_mse, m)?)?;
    m.add_function(wrap_pyfunction!(scheme_names, m)?)?;
    m.add_function(wrap_pyfunction!(default_config_json, m)?)?;
    Ok(())
}
