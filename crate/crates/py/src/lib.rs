//! Python bindings: scenarios, GP training, closed-loop runs and the
//! interactive session behind the WebSocket bridge.

use std::path::PathBuf;

use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;

use handover_mpc::bridge;
use handover_mpc::gpr::{HandoverModel, SavedModel};
use handover_mpc::logfile::{self, LOG_HEADER};
use handover_mpc::predictor::{predict_handover_location, HumanObservation};
use handover_mpc::sim::{self, LogRow};

fn to_py(e: handover_mpc::Error) -> PyErr {
    match e {
        handover_mpc::Error::Io(msg) => PyIOError::new_err(msg),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn row_values(r: &LogRow) -> Vec<f64> {
    let mut v = vec![r.t];
    v.extend(r.q.iter().chain(&r.dq).chain(&r.p_r).chain(&r.rpy_r));
    v.extend([r.phi_c, r.dphi, r.phi_h, r.phi_ho, r.w_pred]);
    v.extend(r.e_orth);
    v.extend(r.bounds.iter().flat_map(|(lo, up)| [*lo, *up]));
    v.push(f64::from(r.status.code()));
    v.push(r.solve_ms);
    v
}

#[pyclass(name = "Scenario", module = "handover")]
#[derive(Clone)]
struct PyScenario {
    inner: handover_mpc::Scenario,
}

#[pymethods]
impl PyScenario {
    /// Built-in defaults.
    #[new]
    fn new() -> Self {
        Self { inner: handover_mpc::Scenario::default() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: handover_mpc::Scenario::load(&path).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: handover_mpc::Scenario::from_toml(text, "<string>").map_err(to_py)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
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
    fn duration(&self) -> f64 {
        self.inner.duration
    }

    #[setter]
    fn set_duration(&mut self, duration: f64) -> PyResult<()> {
        let mut s = self.inner.clone();
        s.duration = duration;
        s.validate().map_err(to_py)?;
        self.inner = s;
        Ok(())
    }

    #[getter]
    fn sample_time(&self) -> f64 {
        self.inner.ocp.sample_time
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, seed={}, duration={})", self.inner.name, self.inner.seed, self.inner.duration)
    }
}

/// Per-axis GP models of the handover location.
#[pyclass(name = "Model", module = "handover")]
#[derive(Clone)]
struct PyModel {
    inner: HandoverModel,
}

#[pymethods]
impl PyModel {
    /// Generates the scenario's synthetic reaching data and fits the models.
    #[staticmethod]
    fn train(scenario: &PyScenario) -> PyResult<Self> {
        let s = &scenario.inner;
        let set = sim::generate_training_data(&s.training, s.seed).map_err(to_py)?;
        Ok(Self { inner: HandoverModel::fit(&set, &s.gp).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: SavedModel::load(&path).and_then(|m| m.fit()).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let saved = SavedModel { hyperparameters: self.inner.axes[0].hyperparameters().clone(), training: self.inner.training_set() };
        saved.save(&path).map_err(to_py)
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.axes[0].dataset().len()
    }

    /// Predicted handover location and per-axis variance for a hand at
    /// `position` moving with `velocity`.
    fn predict(&self, position: [f64; 3], velocity: [f64; 3]) -> ([f64; 3], [f64; 3]) {
        let obs = HumanObservation { position: Vector3::from(position), velocity: Vector3::from(velocity), rotation: Matrix3::identity(), t: 0.0 };
        let p = predict_handover_location(&self.inner, &obs);
        (p.mean.into(), p.covariance.diagonal().into())
    }
}

/// A closed-loop run.
#[pyclass(name = "Log", module = "handover")]
struct PyLog {
    inner: sim::SimLog,
}

#[pymethods]
impl PyLog {
    #[getter]
    fn scenario(&self) -> String {
        self.inner.scenario.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn sample_time(&self) -> f64 {
        self.inner.sample_time
    }

    #[getter]
    fn grasp_time(&self) -> Option<f64> {
        self.inner.grasp_time
    }

    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }

    #[staticmethod]
    fn columns() -> Vec<&'static str> {
        LOG_HEADER.split(',').collect()
    }

    /// One column by header name. `status` comes back as its numeric code.
    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        let idx = LOG_HEADER.split(',').position(|c| c == name).ok_or_else(|| PyKeyError::new_err(name.to_string()))?;
        Ok(self.inner.rows.iter().map(|r| row_values(r)[idx]).collect())
    }

    /// All rows as lists of floats in header order.
    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows.iter().map(row_values).collect()
    }

    /// Bridge `state` messages, one JSON string per row.
    fn state_messages(&self) -> Vec<String> {
        self.inner.rows.iter().map(|r| bridge::ServerMessage::State(bridge::StateMessage::from_row(r)).to_json()).collect()
    }

    fn to_csv(&self) -> String {
        logfile::log_to_csv(&self.inner)
    }

    /// Writes the CSV and its JSON sidecar into `dir`; returns the CSV path.
    fn write(&self, scenario: &PyScenario, dir: PathBuf) -> PyResult<PathBuf> {
        logfile::write_log(&self.inner, &scenario.inner, &dir).map_err(to_py)
    }
}

fn model_or_train(scenario: &PyScenario, model: Option<&PyModel>) -> PyResult<HandoverModel> {
    match model {
        Some(m) => Ok(m.inner.clone()),
        None => PyModel::train(scenario).map(|m| m.inner),
    }
}

/// Runs the scenario's scripted hand motion in closed loop.
#[pyfunction]
#[pyo3(signature = (scenario, model=None))]
fn run(py: Python<'_>, scenario: &PyScenario, model: Option<&PyModel>) -> PyResult<PyLog> {
    let model = model_or_train(scenario, model)?;
    let s = scenario.inner.clone();
    let log = py.allow_threads(move || sim::run_closed_loop(&s, model)).map_err(to_py)?;
    Ok(PyLog { inner: log })
}

/// Runs the planner against a recorded hand stream given as CSV text.
#[pyfunction]
#[pyo3(signature = (scenario, stream_csv, model=None))]
fn run_stream(py: Python<'_>, scenario: &PyScenario, stream_csv: &str, model: Option<&PyModel>) -> PyResult<PyLog> {
    let stream = logfile::parse_hand_stream(stream_csv, "<string>").map_err(to_py)?;
    let model = model_or_train(scenario, model)?;
    let s = scenario.inner.clone();
    let log = py.allow_threads(move || sim::run_with_stream(&s, model, &stream)).map_err(to_py)?;
    Ok(PyLog { inner: log })
}

/// Parses a log CSV into bridge `state` messages.
#[pyfunction]
fn read_log_messages(path: PathBuf) -> PyResult<Vec<String>> {
    let rows = logfile::read_log(&path).map_err(to_py)?;
    Ok(rows.iter().map(|r| bridge::ServerMessage::State(bridge::StateMessage::from_row(r)).to_json()).collect())
}

/// The planner session the WebSocket bridge runs per connection, driven by
/// hand: feed it client JSON with `handle` and advance it with `tick`.
#[pyclass(name = "Session", module = "handover")]
struct PySession {
    inner: bridge::Session,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (scenario, model=None))]
    fn new(scenario: &PyScenario, model: Option<&PyModel>) -> PyResult<Self> {
        let model = model_or_train(scenario, model)?;
        Ok(Self { inner: bridge::Session::new(scenario.inner.clone(), model, None).map_err(to_py)? })
    }

    /// Handles one client message; returns any immediate replies as JSON.
    fn handle(&mut self, text: &str) -> Vec<String> {
        self.inner.handle_text(text).iter().map(bridge::ServerMessage::to_json).collect()
    }

    /// One planner cycle; `None` while paused.
    fn tick(&mut self) -> Option<String> {
        self.inner.tick().map(|m| m.to_json())
    }

    #[getter]
    fn now(&self) -> f64 {
        self.inner.now()
    }

    #[getter]
    fn running(&self) -> bool {
        self.inner.is_running()
    }

    #[getter]
    fn grasped(&self) -> bool {
        self.inner.grasped()
    }
}

#[pymodule]
fn handover(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyLog>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_stream, m)?)?;
    m.add_function(wrap_pyfunction!(read_log_messages, m)?)?;
    m.add("DEFAULT_PORT", bridge::DEFAULT_PORT)?;
    Ok(())
}
