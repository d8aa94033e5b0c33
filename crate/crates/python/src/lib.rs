//! Python bindings: configuration, training, evaluation and statistics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use lira::checkpoint::Checkpoint;
use lira::config::ExperimentConfig;
use lira::envs::NoiseKind;
use lira::harness::{self, LogRow, Trainer};
use lira::learner::LiraMode;
use lira::stats;
use lira::tensor::Array;
use lira::{LiraError, LiraRng};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;

fn to_py(e: LiraError) -> PyErr {
    match e {
        LiraError::Config { .. } => PyValueError::new_err(e.to_string()),
        LiraError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn noise_kind(name: &str) -> PyResult<NoiseKind> {
    NoiseKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown disturbance {name:?}; expected nominal, brown3 or brown6")))
}

fn row_dict<'py>(py: Python<'py>, row: &LogRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("episode", row.episode)?;
    d.set_item("return", row.ret)?;
    d.set_item("loss_marginal", row.loss_marginal)?;
    d.set_item("loss_aware", row.loss_aware)?;
    d.set_item("gap", row.gap)?;
    d.set_item("lambda_mean", row.lambda_mean)?;
    d.set_item("gamma", row.gamma)?;
    d.set_item("adversary_scale", row.adversary_scale)?;
    d.set_item("wall_time", row.wall_time)?;
    Ok(d)
}

/// Experiment configuration, parsed and validated from TOML.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::from_toml(toml).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::load(&path).map_err(to_py)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.run.mode.name()
    }

    #[setter]
    fn set_mode(&mut self, name: &str) -> PyResult<()> {
        self.inner.run.mode = LiraMode::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown mode {name:?}")))?;
        Ok(())
    }

    #[getter]
    fn episodes(&self) -> usize {
        self.inner.run.episodes
    }

    #[setter]
    fn set_episodes(&mut self, n: usize) {
        self.inner.run.episodes = n;
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.run.seeds.clone()
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(mode={:?}, episodes={})", self.inner.run.mode.name(), self.inner.run.episodes)
    }
}

/// One training run: alternates data collection and model learning.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: Trainer::new(config.inner.clone(), seed).map_err(to_py)? })
    }

    /// Collects one episode, trains, and returns the log row as a dict.
    fn run_episode<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let row = self.inner.run_episode().map_err(to_py)?;
        row_dict(py, &row)
    }

    #[getter]
    fn episode(&self) -> usize {
        self.inner.episode()
    }

    #[getter]
    fn buffer_len(&self) -> usize {
        self.inner.buffer.len()
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(to_py)
    }

    /// Mean next state and reward of the marginalized model for one `(s, a)`.
    fn predict(&self, s: Vec<f64>, a: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (sn, r) = self
            .inner
            .learner
            .model
            .predict_mean(&Array::matrix(1, s.len(), s), &Array::matrix(1, a.len(), a))
            .map_err(to_py)?;
        Ok((sn.into_data(), r.into_data()))
    }

    /// A disturbance the current adversary (or prior) would apply at `s`.
    #[pyo3(signature = (s, seed = 0))]
    fn disturbance(&self, s: Vec<f64>, seed: u64) -> PyResult<Vec<f64>> {
        self.inner.learner.disturbance(&s, &mut LiraRng::seed_from_u64(seed)).map_err(to_py)
    }

    /// Evaluates the current model under a test disturbance; returns per-trial returns.
    #[pyo3(signature = (disturbance = "nominal", trials = 30, seed = 0))]
    fn evaluate(&self, disturbance: &str, trials: usize, seed: u64) -> PyResult<Vec<f64>> {
        let kind = noise_kind(disturbance)?;
        let t = &self.inner;
        harness::evaluate(&t.learner.model, t.env.as_ref(), &t.config.planner, kind, trials, seed).map_err(to_py)
    }
}

/// Trains `seed` into `out` and returns the log rows.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig, seed: u64, out: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let summary = harness::train(&config.inner, seed, &out).map_err(to_py)?;
    summary.rows.iter().map(|r| row_dict(py, r)).collect()
}

/// Evaluates a checkpoint file; returns `(iqm, returns)`.
#[pyfunction]
#[pyo3(signature = (path, disturbance = "nominal", trials = 30, seed = 0))]
fn evaluate_checkpoint(path: PathBuf, disturbance: &str, trials: usize, seed: u64) -> PyResult<(f64, Vec<f64>)> {
    let report = harness::eval_checkpoint(&path, noise_kind(disturbance)?, trials, seed, None).map_err(to_py)?;
    Ok((report.iqm, report.returns))
}

/// Parameter names and shapes stored in a checkpoint.
#[pyfunction]
fn checkpoint_params(path: PathBuf) -> PyResult<Vec<(String, Vec<usize>)>> {
    let ck = Checkpoint::load(&path).map_err(to_py)?;
    Ok(ck.params.iter().map(|(n, a)| (n.clone(), a.shape().to_vec())).collect())
}

#[pyfunction]
fn iqm(xs: Vec<f64>) -> PyResult<f64> {
    stats::iqm(&xs).map_err(to_py)
}

/// Returns `{"mean", "ci_half_width", "kept"}`.
#[pyfunction]
fn aggregate_models<'py>(py: Python<'py>, scores: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let s = stats::aggregate_models(&scores).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mean", s.mean)?;
    d.set_item("ci_half_width", s.ci_half_width)?;
    d.set_item("kept", s.kept)?;
    Ok(d)
}

/// `{method: {noise: [score per model]}}` to `{method: [metric per model]}`.
#[pyfunction]
fn combined_metric(table: BTreeMap<String, BTreeMap<String, Vec<f64>>>) -> PyResult<BTreeMap<String, Vec<f64>>> {
    stats::combined_metric(&table).map_err(to_py)
}

/// Steps an environment once: returns `(next_state, reward, terminated)`.
#[pyfunction]
fn env_step(config: &PyConfig, s: Vec<f64>, a: Vec<f64>, d: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, bool)> {
    let env = config.inner.env.build().map_err(to_py)?;
    let st = env.step(&s, &a, &d);
    Ok((st.next, st.reward, st.terminated))
}

#[pyfunction]
fn modes() -> Vec<&'static str> {
    LiraMode::ALL.iter().map(|m| m.name()).collect()
}

#[pymodule]
fn pylira(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_params, m)?)?;
    m.add_function(wrap_pyfunction!(iqm, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_models, m)?)?;
    m.add_function(wrap_pyfunction!(combined_metric, m)?)?;
    m.add_function(wrap_pyfunction!(env_step, m)?)?;
    m.add_function(wrap_pyfunction!(modes, m)?)?;
    Ok(())
}
