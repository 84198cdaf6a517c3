//! Fixed-step closed-loop simulation, scripted events and logging.

use crate::controller::{control_step, ControlError, ControlGains, ControlSetpoint, ControllerMemory, TrackingErrors};
use crate::dynamics::{
    arm_joint_accel, coupling_wrench, derivatives, total_mass, ControlInputs, CouplingWrench, DynamicsError,
    StateDerivative, VehicleParams, VehicleState, ARM_JOINTS,
};
use crate::bridge::CommandMessage;
use crate::se3::{euler_from_rotation, exp_so3, orthonormality_defect, reproject_so3, rotation_from_euler, wrap_angle, EulerAngles, Mat3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const MAX_DT: f64 = 0.05;

pub const CSV_HEADER: &str =
    "t,x,y,z,vx,vy,vz,phi,theta,psi,p,q,r,q1,q2,q3,f,taux,tauy,tauz,ep_norm,eR_norm,mass";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("simulation diverged at t = {t:.6} s: {reason}")]
    Diverged { t: f64, reason: String },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttitudeIntegration {
    /// Integrate the nine entries of R, then reproject onto SO(3).
    #[default]
    Matrix,
    /// Right-multiply by the exponential of the RK4-averaged body rate.
    ExpMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceModel {
    None,
    /// Gravity-offset and CoM-acceleration model of the arm.
    QuasiStatic,
    /// Seeded piecewise-linear noise, uniform in `[-amplitude, amplitude]`
    /// per axis at knots spaced `knot_interval` apart.
    Random {
        force_amplitude: f64,
        moment_amplitude: f64,
        knot_interval: f64,
    },
}

impl Default for DisturbanceModel {
    fn default() -> Self {
        Self::QuasiStatic
    }
}

impl DisturbanceModel {
    pub fn default_random() -> Self {
        Self::Random { force_amplitude: 0.2, moment_amplitude: 1.0, knot_interval: 0.5 }
    }
}

/// Partial setpoint update; absent fields keep their current value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetpointChange {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<Vec3>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec3>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accel: Option<Vec3>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub yaw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbancePulse {
    pub force: Vec3,
    pub moment: Vec3,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Setpoint(SetpointChange),
    /// Relative move of the position setpoint and yaw.
    Nudge { delta: Vec3, yaw: f64 },
    ArmCommand([f64; ARM_JOINTS]),
    PayloadAttach,
    PayloadRelease,
    DisturbancePulse(DisturbancePulse),
}

/// Operator commands arriving on `/teleop`.
impl From<CommandMessage> for Event {
    fn from(cmd: CommandMessage) -> Self {
        match cmd {
            CommandMessage::Nudge { delta, yaw } => Event::Nudge { delta: Vec3::from(delta), yaw },
            CommandMessage::Setpoint { position, yaw } => {
                Event::Setpoint(SetpointChange { position: Some(Vec3::from(position)), yaw: Some(yaw), ..Default::default() })
            }
            CommandMessage::Arm { joints } => Event::ArmCommand(joints),
            CommandMessage::Grasp => Event::PayloadAttach,
            CommandMessage::Release => Event::PayloadRelease,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadAction {
    Attach,
    Release,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NudgeSpec {
    #[serde(default = "Vec3::zeros")]
    delta: Vec3,
    #[serde(default)]
    yaw: f64,
}

/// File form of a timed event: `t` plus exactly one action key.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    setpoint: Option<SetpointChange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nudge: Option<NudgeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arm: Option<[f64; ARM_JOINTS]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload: Option<PayloadAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pulse: Option<DisturbancePulse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEvent", into = "RawEvent")]
pub struct TimedEvent {
    pub t: f64,
    pub event: Event,
}

impl TimedEvent {
    pub fn new(t: f64, event: Event) -> Self {
        Self { t, event }
    }
}

impl TryFrom<RawEvent> for TimedEvent {
    type Error = String;

    fn try_from(raw: RawEvent) -> Result<Self, String> {
        let mut found = Vec::new();
        if let Some(s) = raw.setpoint {
            found.push(Event::Setpoint(s));
        }
        if let Some(n) = raw.nudge {
            found.push(Event::Nudge { delta: n.delta, yaw: n.yaw });
        }
        if let Some(a) = raw.arm {
            found.push(Event::ArmCommand(a));
        }
        if let Some(p) = raw.payload {
            found.push(match p {
                PayloadAction::Attach => Event::PayloadAttach,
                PayloadAction::Release => Event::PayloadRelease,
            });
        }
        if let Some(p) = raw.pulse {
            found.push(Event::DisturbancePulse(p));
        }
        match found.len() {
            1 => Ok(TimedEvent { t: raw.t, event: found.remove(0) }),
            0 => Err(format!(
                "event at t = {} needs one of `setpoint`, `nudge`, `arm`, `payload`, `pulse`",
                raw.t
            )),
            _ => Err(format!("event at t = {} has more than one action key", raw.t)),
        }
    }
}

impl From<TimedEvent> for RawEvent {
    fn from(e: TimedEvent) -> Self {
        let mut raw = RawEvent { t: e.t, ..RawEvent::default() };
        match e.event {
            Event::Setpoint(s) => raw.setpoint = Some(s),
            Event::Nudge { delta, yaw } => raw.nudge = Some(NudgeSpec { delta, yaw }),
            Event::ArmCommand(a) => raw.arm = Some(a),
            Event::PayloadAttach => raw.payload = Some(PayloadAction::Attach),
            Event::PayloadRelease => raw.payload = Some(PayloadAction::Release),
            Event::DisturbancePulse(p) => raw.pulse = Some(p),
        }
        raw
    }
}

/// Initial condition: vehicle at rest at `position` with attitude `euler`;
/// the setpoint starts at `setpoint` (defaults to the initial position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialCondition {
    pub position: Vec3,
    pub euler: [f64; 3],
    pub arm: [f64; ARM_JOINTS],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setpoint: Option<Vec3>,
    pub yaw_setpoint: f64,
}

impl Default for InitialCondition {
    fn default() -> Self {
        Self {
            position: Vec3::new(0.0, 0.0, -2.0),
            euler: [0.0; 3],
            arm: [0.0; 3],
            setpoint: None,
            yaw_setpoint: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub seed: u64,
    /// Log every `decimation`-th step.
    pub decimation: u32,
    pub attitude_integration: AttitudeIntegration,
    pub disturbance: DisturbanceModel,
    pub initial: InitialCondition,
    pub vehicle: VehicleParams,
    pub gains: ControlGains,
    pub events: Vec<TimedEvent>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.002,
            duration: 10.0,
            seed: 0,
            decimation: 10,
            attitude_integration: AttitudeIntegration::Matrix,
            disturbance: DisturbanceModel::QuasiStatic,
            initial: InitialCondition::default(),
            vehicle: VehicleParams::default(),
            gains: ControlGains::default(),
            events: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return bad(format!("dt must lie in (0, {MAX_DT}], got {}", self.dt));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be >= 0, got {}", self.duration));
        }
        if self.decimation == 0 {
            return bad("decimation must be >= 1".into());
        }
        self.vehicle.validate()?;
        self.gains.validate()?;
        if let DisturbanceModel::Random { force_amplitude, moment_amplitude, knot_interval } = self.disturbance {
            if !(force_amplitude >= 0.0 && moment_amplitude >= 0.0 && knot_interval > 0.0) {
                return bad("random disturbance needs amplitudes >= 0 and knot_interval > 0".into());
            }
        }
        let mut last = f64::NEG_INFINITY;
        for e in &self.events {
            if !(e.t >= 0.0 && e.t <= self.duration) {
                return bad(format!("event time {} outside [0, {}]", e.t, self.duration));
            }
            if e.t < last {
                return bad(format!("events not sorted by time ({} after {})", e.t, last));
            }
            last = e.t;
            if let Event::DisturbancePulse(p) = &e.event {
                if !(p.duration >= 0.0) {
                    return bad("pulse duration must be >= 0".into());
                }
            }
        }
        Ok(())
    }

    pub fn initial_state(&self) -> VehicleState {
        VehicleState {
            position: self.initial.position,
            attitude: rotation_from_euler(&EulerAngles::from_array(self.initial.euler)),
            arm_angles: self.initial.arm,
            ..VehicleState::default()
        }
    }

    pub fn initial_setpoint(&self) -> ControlSetpoint {
        ControlSetpoint {
            arm_commands: self.initial.arm,
            ..ControlSetpoint::hold(self.initial.setpoint.unwrap_or(self.initial.position), self.initial.yaw_setpoint)
        }
    }
}

/// Source of the coupling disturbance seen by the integrator.
pub trait WrenchSource {
    /// `t` is absolute simulation time, `qdd` the joint accelerations at the
    /// evaluated state.
    fn wrench(&self, t: f64, state: &VehicleState, qdd: &[f64; ARM_JOINTS]) -> CouplingWrench;
}

pub struct NoWrench;

impl WrenchSource for NoWrench {
    fn wrench(&self, _: f64, _: &VehicleState, _: &[f64; ARM_JOINTS]) -> CouplingWrench {
        CouplingWrench::ZERO
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ActivePulse {
    start: f64,
    end: f64,
    wrench: CouplingWrench,
}

/// Disturbance configured for a run: the base model plus any active pulses.
#[derive(Debug, Clone)]
pub struct DisturbanceField {
    model: DisturbanceModel,
    seed: u64,
    fd_step: f64,
    params: VehicleParams,
    pulses: Vec<ActivePulse>,
}

impl DisturbanceField {
    pub fn new(model: DisturbanceModel, seed: u64, fd_step: f64, params: VehicleParams) -> Self {
        Self { model, seed, fd_step, params, pulses: Vec::new() }
    }

    fn add_pulse(&mut self, start: f64, pulse: &DisturbancePulse) {
        self.pulses.retain(|p| p.end > start);
        self.pulses.push(ActivePulse {
            start,
            end: start + pulse.duration,
            wrench: CouplingWrench { force: pulse.force, moment: pulse.moment },
        });
    }

    fn knot(&self, k: i64) -> CouplingWrench {
        let DisturbanceModel::Random { force_amplitude, moment_amplitude, .. } = self.model else {
            return CouplingWrench::ZERO;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        let mut draw = |a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let force = Vec3::new(draw(force_amplitude), draw(force_amplitude), draw(force_amplitude));
        let moment = Vec3::new(draw(moment_amplitude), draw(moment_amplitude), draw(moment_amplitude));
        CouplingWrench { force, moment }
    }

    fn random_at(&self, t: f64, interval: f64) -> CouplingWrench {
        let s = t / interval;
        let k = s.floor();
        let frac = s - k;
        let a = self.knot(k as i64);
        let b = self.knot(k as i64 + 1);
        CouplingWrench {
            force: a.force * (1.0 - frac) + b.force * frac,
            moment: a.moment * (1.0 - frac) + b.moment * frac,
        }
    }
}

impl WrenchSource for DisturbanceField {
    fn wrench(&self, t: f64, state: &VehicleState, qdd: &[f64; ARM_JOINTS]) -> CouplingWrench {
        let base = match self.model {
            DisturbanceModel::None => CouplingWrench::ZERO,
            DisturbanceModel::QuasiStatic => coupling_wrench(state, qdd, &self.params, self.fd_step),
            DisturbanceModel::Random { knot_interval, .. } => self
                .random_at(t, knot_interval)
                .clamped(self.params.force_max, self.params.moment_max),
        };
        self.pulses
            .iter()
            .filter(|p| t >= p.start && t < p.end)
            .fold(base, |acc, p| acc.add(p.wrench))
    }
}

fn eval(
    t: f64,
    state: &VehicleState,
    inputs: &ControlInputs,
    params: &VehicleParams,
    source: &impl WrenchSource,
) -> Result<StateDerivative, DynamicsError> {
    let qdd = arm_joint_accel(&state.arm_angles, &state.arm_rates, &inputs.arm_commands, &params.joint_pd_gains);
    let wrench = source.wrench(t, state, &qdd);
    derivatives(state, inputs, params, &wrench)
}

/// `stage_rates` is the body rate of the state `k` was evaluated at.
fn advance(
    base: &VehicleState,
    k: &StateDerivative,
    stage_rates: &Vec3,
    h: f64,
    integration: AttitudeIntegration,
) -> VehicleState {
    let attitude = match integration {
        AttitudeIntegration::Matrix => base.attitude + k.attitude * h,
        AttitudeIntegration::ExpMap => base.attitude * exp_so3(&(stage_rates * h)),
    };
    VehicleState {
        position: base.position + k.position * h,
        velocity: base.velocity + k.velocity * h,
        attitude,
        body_rates: base.body_rates + k.body_rates * h,
        arm_angles: std::array::from_fn(|i| base.arm_angles[i] + k.arm_angles[i] * h),
        arm_rates: std::array::from_fn(|i| base.arm_rates[i] + k.arm_rates[i] * h),
        payload_attached: base.payload_attached,
    }
}

/// Classical RK4 step of the full state with inputs held over the step.
///
/// The attitude is returned on SO(3) and arm angles wrapped into [−π, π].
pub fn rk4_step(
    state: &VehicleState,
    inputs: &ControlInputs,
    params: &VehicleParams,
    t: f64,
    dt: f64,
    source: &impl WrenchSource,
    integration: AttitudeIntegration,
) -> Result<VehicleState, SimError> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(SimError::InvalidConfig(format!("dt must lie in (0, {MAX_DT}], got {dt}")));
    }
    let diverged = |e: DynamicsError| SimError::Diverged { t, reason: e.to_string() };
    let k1 = eval(t, state, inputs, params, source).map_err(diverged)?;
    let s2 = advance(state, &k1, &state.body_rates, 0.5 * dt, integration);
    let k2 = eval(t + 0.5 * dt, &s2, inputs, params, source).map_err(diverged)?;
    let s3 = advance(state, &k2, &s2.body_rates, 0.5 * dt, integration);
    let k3 = eval(t + 0.5 * dt, &s3, inputs, params, source).map_err(diverged)?;
    let s4 = advance(state, &k3, &s3.body_rates, dt, integration);
    let k4 = eval(t + dt, &s4, inputs, params, source).map_err(diverged)?;

    let combine3 = |a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3| (a + 2.0 * b + 2.0 * c + d) * (dt / 6.0);
    let combine_arm = |a: &[f64; 3], b: &[f64; 3], c: &[f64; 3], d: &[f64; 3]| -> [f64; 3] {
        std::array::from_fn(|i| (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]) * (dt / 6.0))
    };

    let attitude = match integration {
        AttitudeIntegration::Matrix => {
            let raw: Mat3 = state.attitude
                + (k1.attitude + 2.0 * k2.attitude + 2.0 * k3.attitude + k4.attitude) * (dt / 6.0);
            reproject_so3(&raw).map_err(|e| SimError::Diverged { t, reason: e.to_string() })?
        }
        AttitudeIntegration::ExpMap => {
            let w = combine3(&state.body_rates, &s2.body_rates, &s3.body_rates, &s4.body_rates);
            state.attitude * exp_so3(&w)
        }
    };
    let dq = combine_arm(&k1.arm_angles, &k2.arm_angles, &k3.arm_angles, &k4.arm_angles);
    let dqd = combine_arm(&k1.arm_rates, &k2.arm_rates, &k3.arm_rates, &k4.arm_rates);

    let next = VehicleState {
        position: state.position + combine3(&k1.position, &k2.position, &k3.position, &k4.position),
        velocity: state.velocity + combine3(&k1.velocity, &k2.velocity, &k3.velocity, &k4.velocity),
        attitude,
        body_rates: state.body_rates + combine3(&k1.body_rates, &k2.body_rates, &k3.body_rates, &k4.body_rates),
        arm_angles: std::array::from_fn(|i| wrap_angle(state.arm_angles[i] + dq[i])),
        arm_rates: std::array::from_fn(|i| state.arm_rates[i] + dqd[i]),
        payload_attached: state.payload_attached,
    };
    if !next.is_finite() {
        return Err(SimError::Diverged { t: t + dt, reason: "non-finite state after step".into() });
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    pub t: f64,
    pub state: VehicleState,
    pub inputs: ControlInputs,
    pub errors: TrackingErrors,
    pub mass: f64,
}

impl SimRecord {
    pub fn euler(&self) -> EulerAngles {
        euler_from_rotation(&self.state.attitude).angles
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimLog {
    pub records: Vec<SimRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub duration: f64,
    pub final_ep_norm: f64,
    pub peak_ep_norm: f64,
    pub peak_er_norm: f64,
    /// Earliest time after which `‖e_p‖` stays below the threshold.
    pub convergence_time: Option<f64>,
    pub convergence_threshold: f64,
    pub max_orthonormality_defect: f64,
}

impl SimLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 256 + CSV_HEADER.len() + 1);
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let e = r.euler();
            let s = &r.state;
            let fields = [
                r.t,
                s.position.x,
                s.position.y,
                s.position.z,
                s.velocity.x,
                s.velocity.y,
                s.velocity.z,
                e.phi,
                e.theta,
                e.psi,
                s.body_rates.x,
                s.body_rates.y,
                s.body_rates.z,
                s.arm_angles[0],
                s.arm_angles[1],
                s.arm_angles[2],
                r.inputs.thrust,
                r.inputs.torque.x,
                r.inputs.torque.y,
                r.inputs.torque.z,
                r.errors.position.norm(),
                r.errors.rotation.norm(),
                r.mass,
            ];
            for (i, v) in fields.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self, threshold: f64) -> SimSummary {
        let ep = |r: &SimRecord| r.errors.position.norm();
        let mut convergence_time = Some(0.0);
        for r in &self.records {
            if ep(r) >= threshold {
                convergence_time = None;
            } else if convergence_time.is_none() {
                convergence_time = Some(r.t);
            }
        }
        SimSummary {
            duration: self.records.last().map_or(0.0, |r| r.t),
            final_ep_norm: self.records.last().map_or(0.0, ep),
            peak_ep_norm: self.records.iter().map(ep).fold(0.0, f64::max),
            peak_er_norm: self.records.iter().map(|r| r.errors.rotation.norm()).fold(0.0, f64::max),
            convergence_time: if self.records.is_empty() { None } else { convergence_time },
            convergence_threshold: threshold,
            max_orthonormality_defect: self
                .records
                .iter()
                .map(|r| orthonormality_defect(&r.state.attitude))
                .fold(0.0, f64::max),
        }
    }
}

/// Closed-loop simulation advanced one fixed step at a time.
#[derive(Debug, Clone)]
pub struct Simulation {
    dt: f64,
    params: VehicleParams,
    gains: ControlGains,
    integration: AttitudeIntegration,
    disturbance: DisturbanceField,
    state: VehicleState,
    setpoint: ControlSetpoint,
    memory: ControllerMemory,
    step_index: u64,
}

/// State and control at the start of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub record: SimRecord,
    pub step_index: u64,
}

impl Simulation {
    pub fn new(config: &SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Self {
            dt: config.dt,
            params: config.vehicle.clone(),
            gains: config.gains,
            integration: config.attitude_integration,
            disturbance: DisturbanceField::new(config.disturbance, config.seed, config.dt, config.vehicle.clone()),
            state: config.initial_state(),
            setpoint: config.initial_setpoint(),
            memory: ControllerMemory::default(),
            step_index: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.dt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn setpoint(&self) -> &ControlSetpoint {
        &self.setpoint
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn apply_event(&mut self, event: &Event) {
        match event {
            Event::Setpoint(change) => {
                let sp = &mut self.setpoint;
                if let Some(p) = change.position {
                    sp.position = p;
                }
                if let Some(v) = change.velocity {
                    sp.velocity = v;
                }
                if let Some(a) = change.accel {
                    sp.accel = a;
                }
                if let Some(y) = change.yaw {
                    sp.yaw = wrap_angle(y);
                }
                if let Some(w) = change.rates {
                    sp.rates = w;
                }
            }
            Event::Nudge { delta, yaw } => {
                self.setpoint.position += delta;
                self.setpoint.yaw = wrap_angle(self.setpoint.yaw + yaw);
            }
            Event::ArmCommand(q) => self.setpoint.arm_commands = *q,
            Event::PayloadAttach => self.state.payload_attached = true,
            Event::PayloadRelease => self.state.payload_attached = false,
            Event::DisturbancePulse(p) => self.disturbance.add_pulse(self.time(), p),
        }
    }

    /// Computes the control for the current state, advances one step and
    /// returns the pre-step record.
    pub fn step(&mut self) -> Result<StepRecord, SimError> {
        let t = self.time();
        let out = control_step(&self.state, &self.setpoint, &self.params, &self.gains, self.memory)
            .map_err(|e| SimError::Diverged { t, reason: e.to_string() })?;
        let record = SimRecord {
            t,
            state: self.state.clone(),
            inputs: out.inputs,
            errors: out.errors,
            mass: total_mass(&self.params, self.state.payload_attached),
        };
        self.state = rk4_step(&self.state, &out.inputs, &self.params, t, self.dt, &self.disturbance, self.integration)?;
        self.memory = out.memory;
        let step_index = self.step_index;
        self.step_index += 1;
        Ok(StepRecord { record, step_index })
    }

    /// Record of the current state without advancing.
    pub fn peek(&self) -> Result<SimRecord, SimError> {
        let t = self.time();
        let out = control_step(&self.state, &self.setpoint, &self.params, &self.gains, self.memory)
            .map_err(|e| SimError::Diverged { t, reason: e.to_string() })?;
        Ok(SimRecord {
            t,
            state: self.state.clone(),
            inputs: out.inputs,
            errors: out.errors,
            mass: total_mass(&self.params, self.state.payload_attached),
        })
    }
}

/// Runs `config` to completion, applying each event before the first step
/// whose start time reaches it.
pub fn run_scenario(config: &SimConfig) -> Result<SimLog, SimError> {
    let mut sim = Simulation::new(config)?;
    let n_steps = (config.duration / config.dt).round() as u64;
    let decimation = u64::from(config.decimation);
    let mut events = config.events.iter().peekable();
    let mut log = SimLog { records: Vec::with_capacity((n_steps / decimation + 1) as usize) };
    let eps = 0.5 * config.dt;

    for i in 0..=n_steps {
        let t = sim.time();
        while let Some(e) = events.next_if(|e| e.t <= t + eps) {
            sim.apply_event(&e.event);
        }
        if i == n_steps {
            if i % decimation == 0 {
                log.records.push(sim.peek()?);
            }
            break;
        }
        let step = sim.step()?;
        if i % decimation == 0 {
            log.records.push(step.record);
        }
    }
    Ok(log)
}

/// Canned teleoperated pick-and-place: approach, reach, grasp a 160 g
/// object, climb, traverse, descend, release, retreat.
pub fn pick_and_place_scenario() -> SimConfig {
    use Event::*;
    let sp = |x: f64, y: f64, z: f64| Setpoint(SetpointChange { position: Some(Vec3::new(x, y, z)), ..Default::default() });
    let events = vec![
        TimedEvent::new(1.0, sp(2.0, 0.0, -2.0)),
        TimedEvent::new(6.0, sp(2.0, 0.0, -1.0)),
        TimedEvent::new(10.0, ArmCommand([0.0, 0.8, 0.6])),
        TimedEvent::new(13.0, PayloadAttach),
        TimedEvent::new(14.0, ArmCommand([0.0, 0.0, 0.0])),
        TimedEvent::new(20.0, sp(2.0, 0.0, -2.5)),
        TimedEvent::new(24.0, Setpoint(SetpointChange {
            position: Some(Vec3::new(-1.0, 2.0, -2.5)),
            yaw: Some(std::f64::consts::FRAC_PI_2),
            ..Default::default()
        })),
        TimedEvent::new(32.0, sp(-1.0, 2.0, -1.0)),
        TimedEvent::new(36.0, ArmCommand([0.0, 0.8, 0.6])),
        TimedEvent::new(38.0, PayloadRelease),
        TimedEvent::new(39.0, ArmCommand([0.0, 0.0, 0.0])),
        TimedEvent::new(41.0, sp(-1.0, 2.0, -2.5)),
    ];
    SimConfig {
        duration: 46.0,
        vehicle: VehicleParams { payload_mass: 0.160, ..VehicleParams::default() },
        events,
        ..SimConfig::default()
    }
}
