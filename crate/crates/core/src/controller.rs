//! Geometric position and attitude controller.
//!
//! The outer loop turns position/velocity errors into a desired force
//! direction and collective thrust; the desired attitude aligns body z with
//! that force at the commanded yaw; the inner loop produces body torque from
//! the rotation and rate errors on SO(3).

use crate::dynamics::{total_mass, ControlInputs, VehicleParams, VehicleState, ARM_JOINTS};
use crate::se3::{vee, Mat3, Se3Error, Vec3};
use serde::{Deserialize, Deserializer, Serialize};

/// Below this force norm the commanded thrust direction is undefined.
pub const DEGENERATE_FORCE: f64 = 1e-6;
const PARALLEL_YAW_REFERENCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSetpoint {
    pub position: Vec3,
    pub velocity: Vec3,
    pub accel: Vec3,
    pub yaw: f64,
    pub rates: Vec3,
    pub arm_commands: [f64; ARM_JOINTS],
}

impl Default for ControlSetpoint {
    fn default() -> Self {
        Self {
            position: Vec3::zeros(),
            velocity: Vec3::zeros(),
            accel: Vec3::zeros(),
            yaw: 0.0,
            rates: Vec3::zeros(),
            arm_commands: [0.0; ARM_JOINTS],
        }
    }
}

impl ControlSetpoint {
    pub fn hold(position: Vec3, yaw: f64) -> Self {
        Self { position, yaw, ..Self::default() }
    }
}

/// Gains are per-axis. Configuration files may give any of them as a single
/// scalar, which is broadcast to all three axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlGains {
    #[serde(deserialize_with = "scalar_or_vec3")]
    pub kp: Vec3,
    #[serde(deserialize_with = "scalar_or_vec3")]
    pub kv: Vec3,
    #[serde(deserialize_with = "scalar_or_vec3")]
    pub k_r: Vec3,
    #[serde(deserialize_with = "scalar_or_vec3")]
    pub k_omega: Vec3,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self {
            kp: Vec3::new(2.0, 2.0, 4.0),
            kv: Vec3::new(2.5, 2.5, 4.0),
            k_r: Vec3::repeat(6.0),
            k_omega: Vec3::new(0.6, 0.6, 0.8),
        }
    }
}

impl ControlGains {
    pub fn validate(&self) -> Result<(), ControlError> {
        let all = self.kp.iter().chain(&self.kv).chain(&self.k_r).chain(&self.k_omega);
        if all.clone().any(|g| !g.is_finite() || *g <= 0.0) {
            return Err(ControlError::InvalidGains);
        }
        Ok(())
    }
}

fn scalar_or_vec3<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Gain {
        Scalar(f64),
        Axes([f64; 3]),
    }
    Ok(match Gain::deserialize(d)? {
        Gain::Scalar(s) => Vec3::repeat(s),
        Gain::Axes(a) => Vec3::from(a),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("force vector norm below {DEGENERATE_FORCE:e} (free-fall command)")]
    DegenerateForce,
    #[error("thrust direction is parallel to the yaw reference")]
    ParallelYawReference,
    #[error("gains must be finite and strictly positive")]
    InvalidGains,
    #[error(transparent)]
    Rotation(#[from] Se3Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceCommand {
    pub vector: Vec3,
    /// Set when `‖vector‖ < DEGENERATE_FORCE`.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackingErrors {
    pub position: Vec3,
    pub velocity: Vec3,
    pub rotation: Vec3,
    pub rate: Vec3,
}

/// Memory carried between calls to [`control_step`]: the last valid desired
/// attitude, held whenever the force command is degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerMemory {
    pub last_desired_attitude: Mat3,
}

impl Default for ControllerMemory {
    fn default() -> Self {
        Self { last_desired_attitude: Mat3::identity() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub inputs: ControlInputs,
    pub errors: TrackingErrors,
    pub desired_attitude: Mat3,
    /// True when the desired attitude was held from memory this step.
    pub held_attitude: bool,
    pub memory: ControllerMemory,
}

pub fn position_errors(state: &VehicleState, setpoint: &ControlSetpoint) -> (Vec3, Vec3) {
    (state.position - setpoint.position, state.velocity - setpoint.velocity)
}

/// `F = g e₃ + K_v∘e_v + K_p∘e_p − ẍ_d`.
pub fn force_vector(
    e_p: &Vec3,
    e_v: &Vec3,
    accel_d: &Vec3,
    params: &VehicleParams,
    gains: &ControlGains,
) -> ForceCommand {
    let vector = params.gravity * Vec3::z() + gains.kv.component_mul(e_v) + gains.kp.component_mul(e_p)
        - accel_d;
    ForceCommand { vector, degenerate: vector.norm() < DEGENERATE_FORCE }
}

/// `f = m_total‖F‖`, clamped to `[0, thrust_max]`.
pub fn thrust_magnitude(force: &Vec3, params: &VehicleParams, payload_attached: bool) -> f64 {
    let f = total_mass(params, payload_attached) * force.norm();
    f.clamp(0.0, params.thrust_max(payload_attached))
}

/// Desired attitude whose third column points along `force`, with the first
/// column as close as possible to the heading `yaw`.
pub fn desired_attitude(force: &Vec3, yaw: f64) -> Result<Mat3, ControlError> {
    let norm = force.norm();
    if !(norm >= DEGENERATE_FORCE) {
        return Err(ControlError::DegenerateForce);
    }
    let b3 = force / norm;
    let b1c = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    let b2 = b3.cross(&b1c);
    let b2_norm = b2.norm();
    if b2_norm < PARALLEL_YAW_REFERENCE {
        return Err(ControlError::ParallelYawReference);
    }
    let b2 = b2 / b2_norm;
    let b1 = b2.cross(&b3);
    Ok(Mat3::from_columns(&[b1, b2, b3]))
}

/// `e_R = ½ (R_dᵀR − RᵀR_d)^∨`, `e_Ω = Ω − RᵀR_d Ω_d`.
pub fn attitude_errors(
    r: &Mat3,
    omega: &Vec3,
    r_d: &Mat3,
    omega_d: &Vec3,
) -> Result<(Vec3, Vec3), ControlError> {
    let bracket = r_d.transpose() * r - r.transpose() * r_d;
    let e_r = 0.5 * vee(&bracket)?;
    let e_omega = omega - r.transpose() * r_d * omega_d;
    Ok((e_r, e_omega))
}

/// `τ = −k_R∘e_R − K_Ω∘e_Ω`.
pub fn attitude_torque(e_r: &Vec3, e_omega: &Vec3, gains: &ControlGains) -> Vec3 {
    -gains.k_r.component_mul(e_r) - gains.k_omega.component_mul(e_omega)
}

pub fn control_step(
    state: &VehicleState,
    setpoint: &ControlSetpoint,
    params: &VehicleParams,
    gains: &ControlGains,
    memory: ControllerMemory,
) -> Result<ControlOutput, ControlError> {
    let (e_p, e_v) = position_errors(state, setpoint);
    let force = force_vector(&e_p, &e_v, &setpoint.accel, params, gains);
    let thrust = thrust_magnitude(&force.vector, params, state.payload_attached);

    let (r_d, held) = match desired_attitude(&force.vector, setpoint.yaw) {
        Ok(r_d) => (r_d, false),
        Err(ControlError::DegenerateForce | ControlError::ParallelYawReference) => {
            (memory.last_desired_attitude, true)
        }
        Err(e) => return Err(e),
    };
    let (e_r, e_omega) = attitude_errors(&state.attitude, &state.body_rates, &r_d, &setpoint.rates)?;
    let torque = attitude_torque(&e_r, &e_omega, gains);

    Ok(ControlOutput {
        inputs: ControlInputs { thrust, torque, arm_commands: setpoint.arm_commands },
        errors: TrackingErrors { position: e_p, velocity: e_v, rotation: e_r, rate: e_omega },
        desired_attitude: r_d,
        held_attitude: held,
        memory: ControllerMemory { last_desired_attitude: r_d },
    })
}
