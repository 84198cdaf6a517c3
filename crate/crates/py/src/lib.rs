//! Python bindings: SE(3) helpers, the closed-loop simulator, the frame
//! codec, the avatar twin and the delay estimator.
//!
//! Vectors cross the boundary as lists of floats, matrices as lists of rows
//! and structured results as dicts.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use twinlift_core::avatar::{fidelity_report, ApplyOutcome, TwinState};
use twinlift_core::bridge::capture::read_capture;
use twinlift_core::bridge::{
    decode_frame as decode, encode_frame_str, estimate_delay as estimate, CommandMessage, EstimatorConfig, Trace,
    TraceSample,
};
use twinlift_core::controller::attitude_errors;
use twinlift_core::scenario::ScenarioFile;
use twinlift_core::se3::{self, EulerAngles, Mat3, Vec3};
use twinlift_core::sim::{self, Event, SimLog, SimRecord};

type Rows = [[f64; 3]; 3];

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn mat(rows: &Rows) -> Mat3 {
    Mat3::from_fn(|i, j| rows[i][j])
}

fn rows(m: &Mat3) -> Rows {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyfunction]
fn hat(v: [f64; 3]) -> Rows {
    rows(&se3::hat(&Vec3::from(v)))
}

/// Inverse of `hat`; raises `ValueError` if `m` is not skew-symmetric.
#[pyfunction]
fn vee(m: Rows) -> PyResult<[f64; 3]> {
    se3::vee(&mat(&m)).map(Into::into).map_err(value_err)
}

/// Nearest rotation matrix to `m`.
#[pyfunction]
fn reproject_so3(m: Rows) -> PyResult<Rows> {
    se3::reproject_so3(&mat(&m)).map(|r| rows(&r)).map_err(value_err)
}

/// `‖RᵀR − I‖` (Frobenius).
#[pyfunction]
fn orthonormality_defect(m: Rows) -> f64 {
    se3::orthonormality_defect(&mat(&m))
}

/// Body-to-world rotation from ZYX roll, pitch, yaw.
#[pyfunction]
fn rotation_from_euler(roll: f64, pitch: f64, yaw: f64) -> Rows {
    rows(&se3::rotation_from_euler(&EulerAngles::from_array([roll, pitch, yaw])))
}

/// `(roll, pitch, yaw)` of a rotation matrix.
#[pyfunction]
fn euler_from_rotation(m: Rows) -> (f64, f64, f64) {
    let e = se3::euler_from_rotation(&mat(&m)).angles.to_array();
    (e[0], e[1], e[2])
}

/// Attitude error `e_R` of `r` relative to the desired `r_d`.
#[pyfunction]
fn attitude_error(r: Rows, r_d: Rows) -> PyResult<[f64; 3]> {
    attitude_errors(&mat(&r), &Vec3::zeros(), &mat(&r_d), &Vec3::zeros()).map(|(e, _)| e.into()).map_err(value_err)
}

/// Decodes one wire frame into a dict; raises `ValueError` on malformed input.
#[pyfunction]
fn decode_frame(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    let frame = decode(text.as_bytes()).map_err(value_err)?;
    json_to_py(py, &encode_frame_str(&frame).map_err(value_err)?)
}

/// Canonical wire form of a frame given as JSON text or a dict.
#[pyfunction]
fn encode_frame(py: Python<'_>, frame: &Bound<'_, PyAny>) -> PyResult<String> {
    let text: String = match frame.extract::<String>() {
        Ok(s) => s,
        Err(_) => py.import("json")?.call_method1("dumps", (frame,))?.extract()?,
    };
    let frame = decode(text.as_bytes()).map_err(value_err)?;
    encode_frame_str(&frame).map_err(value_err)
}

fn trace(samples: Vec<(f64, f64, f64, f64, f64)>) -> Trace {
    Trace::new(
        samples
            .into_iter()
            .enumerate()
            .map(|(i, (t, stamp_tx, x, y, z))| TraceSample { t, seq: i as u64, stamp_tx, position: [x, y, z] })
            .collect(),
    )
}

/// Delay of `avatar` behind `robot`. Each trace is a list of
/// `(t_receive, stamp_tx, x, y, z)` tuples.
#[pyfunction]
fn estimate_delay(
    py: Python<'_>,
    robot: Vec<(f64, f64, f64, f64, f64)>,
    avatar: Vec<(f64, f64, f64, f64, f64)>,
) -> PyResult<Py<PyDict>> {
    let e = estimate(&trace(robot), &trace(avatar), &EstimatorConfig::default()).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("lag", e.lag)?;
    d.set_item("correlation", e.correlation)?;
    d.set_item("axis_lags", e.axis_lags.to_vec())?;
    d.set_item("resample_interval", e.resample_interval)?;
    d.set_item("stamp_latency_mean", e.stamp_latency.map(|s| s.mean))?;
    d.set_item("stamp_latency_p95", e.stamp_latency.map(|s| s.p95))?;
    d.set_item("disagreement", e.disagreement)?;
    Ok(d.unbind())
}

/// Fidelity report for two capture files, as written by `twinlift serve`.
#[pyfunction]
fn latency_report(py: Python<'_>, robot: &str, avatar: &str) -> PyResult<Py<PyAny>> {
    let load = |p: &str| {
        let f = std::fs::File::open(p).map_err(|e| value_err(format!("{p}: {e}")))?;
        read_capture(std::io::BufReader::new(f)).map_err(|e| value_err(format!("{p}: {e}")))
    };
    let report = fidelity_report(&load(robot)?, &load(avatar)?, &EstimatorConfig::default()).map_err(value_err)?;
    json_to_py(py, &report.to_json().map_err(runtime_err)?)
}

/// Scenario document: simulation, bridge and logging settings.
#[pyclass(name = "Scenario", from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: ScenarioFile,
}

#[pymethods]
impl PyScenario {
    /// Parses TOML; an empty string gives the defaults.
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        ScenarioFile::from_toml(toml).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        ScenarioFile::load(std::path::Path::new(path)).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn pick_and_place() -> Self {
        Self { inner: ScenarioFile::pick_and_place() }
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.sim.duration
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.sim.dt
    }

    /// Runs the simulation part to completion.
    fn run(&self) -> PyResult<PyLog> {
        sim::run_scenario(&self.inner.sim).map(|log| PyLog { log }).map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, duration={})", self.inner.name, self.inner.sim.duration)
    }
}

fn record_dict<'py>(py: Python<'py>, r: &SimRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let v = |x: &Vec3| -> [f64; 3] { (*x).into() };
    d.set_item("t", r.t)?;
    d.set_item("position", v(&r.state.position))?;
    d.set_item("velocity", v(&r.state.velocity))?;
    d.set_item("euler", r.euler().to_array())?;
    d.set_item("body_rates", v(&r.state.body_rates))?;
    d.set_item("arm", r.state.arm_angles)?;
    d.set_item("payload_attached", r.state.payload_attached)?;
    d.set_item("thrust", r.inputs.thrust)?;
    d.set_item("torque", v(&r.inputs.torque))?;
    d.set_item("e_p", v(&r.errors.position))?;
    d.set_item("e_r", v(&r.errors.rotation))?;
    d.set_item("mass", r.mass)?;
    Ok(d)
}

/// Logged run of a scenario.
#[pyclass(name = "Log")]
struct PyLog {
    log: SimLog,
}

#[pymethods]
impl PyLog {
    fn __len__(&self) -> usize {
        self.log.records.len()
    }

    fn __getitem__<'py>(&self, py: Python<'py>, i: isize) -> PyResult<Bound<'py, PyDict>> {
        let n = self.log.records.len() as isize;
        let k = if i < 0 { i + n } else { i };
        if !(0..n).contains(&k) {
            return Err(pyo3::exceptions::PyIndexError::new_err("record index out of range"));
        }
        record_dict(py, &self.log.records[k as usize])
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.log.records.iter().map(|r| r.t).collect()
    }

    #[getter]
    fn positions(&self) -> Vec<[f64; 3]> {
        self.log.records.iter().map(|r| r.state.position.into()).collect()
    }

    #[getter]
    fn masses(&self) -> Vec<f64> {
        self.log.records.iter().map(|r| r.mass).collect()
    }

    fn to_csv(&self) -> String {
        self.log.to_csv()
    }

    #[pyo3(signature = (threshold = 0.05))]
    fn summary(&self, py: Python<'_>, threshold: f64) -> PyResult<Py<PyAny>> {
        let text = serde_json::to_string(&self.log.summary(threshold)).map_err(runtime_err)?;
        json_to_py(py, &text)
    }
}

/// Step-by-step simulation that accepts operator commands between steps.
#[pyclass(name = "Simulation")]
struct PySimulation {
    sim: sim::Simulation,
}

impl PySimulation {
    fn command(&mut self, cmd: CommandMessage) {
        self.sim.apply_event(&Event::from(cmd));
    }
}

#[pymethods]
impl PySimulation {
    #[new]
    #[pyo3(signature = (scenario = None))]
    fn new(scenario: Option<PyScenario>) -> PyResult<Self> {
        let config = scenario.map(|s| s.inner.sim).unwrap_or_default();
        sim::Simulation::new(&config).map(|sim| Self { sim }).map_err(value_err)
    }

    #[getter]
    fn time(&self) -> f64 {
        self.sim.time()
    }

    /// Advances `n` steps and returns the record at the new time.
    #[pyo3(signature = (n = 1))]
    fn step<'py>(&mut self, py: Python<'py>, n: usize) -> PyResult<Bound<'py, PyDict>> {
        for _ in 0..n {
            self.sim.step().map_err(runtime_err)?;
        }
        self.state(py)
    }

    /// Advances until `t` seconds of simulated time have elapsed.
    fn run_until<'py>(&mut self, py: Python<'py>, t: f64) -> PyResult<Bound<'py, PyDict>> {
        let n = ((t - self.sim.time()) / self.sim.dt()).round().max(0.0) as usize;
        self.step(py, n)
    }

    fn state<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        record_dict(py, &self.sim.peek().map_err(runtime_err)?)
    }

    #[pyo3(signature = (dx, dy, dz, yaw = 0.0))]
    fn nudge(&mut self, dx: f64, dy: f64, dz: f64, yaw: f64) {
        self.command(CommandMessage::Nudge { delta: [dx, dy, dz], yaw });
    }

    #[pyo3(signature = (x, y, z, yaw = 0.0))]
    fn setpoint(&mut self, x: f64, y: f64, z: f64, yaw: f64) {
        self.command(CommandMessage::Setpoint { position: [x, y, z], yaw });
    }

    fn arm(&mut self, joints: [f64; 3]) {
        self.command(CommandMessage::Arm { joints });
    }

    fn grasp(&mut self) {
        self.command(CommandMessage::Grasp);
    }

    fn release(&mut self) {
        self.command(CommandMessage::Release);
    }
}

/// Avatar-side mirror of the vehicle fed with telemetry frames.
#[pyclass(name = "Twin")]
struct PyTwin {
    twin: TwinState,
}

#[pymethods]
impl PyTwin {
    #[new]
    fn new() -> Self {
        Self { twin: TwinState::new() }
    }

    /// Applies one wire frame received at `rx`; returns `"applied"`,
    /// `"stale"` or `"rejected"`.
    fn apply(&mut self, rx: f64, frame: &str) -> &'static str {
        match self.twin.apply_bytes(rx, frame.as_bytes()) {
            Ok(ApplyOutcome::Applied) => "applied",
            Ok(ApplyOutcome::Stale) => "stale",
            Ok(ApplyOutcome::Rejected) | Err(_) => "rejected",
        }
    }

    /// Interpolated pose at time `t`; `None` before the first pose.
    fn render<'py>(&self, py: Python<'py>, t: f64) -> PyResult<Option<Bound<'py, PyDict>>> {
        let Ok(s) = self.twin.render_state(t) else { return Ok(None) };
        let d = PyDict::new(py);
        d.set_item("position", s.position)?;
        d.set_item("euler", s.euler)?;
        d.set_item("joints", s.joints)?;
        d.set_item("payload_attached", s.payload_attached)?;
        d.set_item("stale", s.stale)?;
        Ok(Some(d))
    }

    #[getter]
    fn counters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.twin.counters();
        let d = PyDict::new(py);
        d.set_item("received", c.received)?;
        d.set_item("applied", c.applied)?;
        d.set_item("stale", c.stale)?;
        d.set_item("rejected", c.rejected)?;
        Ok(d)
    }
}

#[pymodule]
#[pyo3(name = "twinlift")]
fn twinlift_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hat, m)?)?;
    m.add_function(wrap_pyfunction!(vee, m)?)?;
    m.add_function(wrap_pyfunction!(reproject_so3, m)?)?;
    m.add_function(wrap_pyfunction!(orthonormality_defect, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_from_euler, m)?)?;
    m.add_function(wrap_pyfunction!(euler_from_rotation, m)?)?;
    m.add_function(wrap_pyfunction!(attitude_error, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(encode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_delay, m)?)?;
    m.add_function(wrap_pyfunction!(latency_report, m)?)?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyLog>()?;
    m.add_class::<PySimulation>()?;
    m.add_class::<PyTwin>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
