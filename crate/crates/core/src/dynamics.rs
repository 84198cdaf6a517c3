//! Rigid-body model of the quadrotor base carrying a three-joint arm.
//!
//! World frame is NED (`e₃` points down), so hover thrust acts along `−R e₃`.
//! The arm is a set of PD-servoed double integrators; its effect on the base
//! enters only through the [`CouplingWrench`] disturbance terms.

use crate::se3::{hat, Mat3, Vec3};
use serde::{Deserialize, Serialize};

pub const ARM_JOINTS: usize = 3;

/// Direction of every link when all joints read zero (body frame).
pub const STOWED_LINK_DIRECTION: [f64; 3] = [0.0, 0.0, -1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointGains {
    pub kp: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// kg
    pub mass_base: f64,
    /// Diagonal of the body inertia, kg·m².
    pub inertia: [f64; 3],
    /// m/s²
    pub gravity: f64,
    pub arm_link_masses: [f64; ARM_JOINTS],
    pub arm_link_lengths: [f64; ARM_JOINTS],
    /// Arm base position in the body frame, m.
    pub arm_mount_offset: [f64; 3],
    pub payload_mass: f64,
    pub joint_pd_gains: [JointGains; ARM_JOINTS],
    /// Bound on `|F_a|`, m/s².
    pub force_max: f64,
    /// Bound on `|T|`, rad/s².
    pub moment_max: f64,
    /// Thrust limit as a multiple of the current weight `m_total·g`.
    pub thrust_to_weight_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass_base: 1.5,
            inertia: [0.03, 0.03, 0.06],
            gravity: 9.81,
            arm_link_masses: [0.05; 3],
            arm_link_lengths: [0.10; 3],
            arm_mount_offset: [0.0, 0.0, 0.05],
            payload_mass: 0.160,
            joint_pd_gains: [JointGains { kp: 16.0, kd: 8.0 }; 3],
            force_max: 2.0,
            moment_max: 5.0,
            thrust_to_weight_max: 4.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |what: &'static str| Err(DynamicsError::InvalidParams(what));
        let finite = [self.mass_base, self.gravity, self.payload_mass, self.force_max, self.moment_max]
            .into_iter()
            .chain(self.inertia)
            .chain(self.arm_link_masses)
            .chain(self.arm_link_lengths)
            .chain(self.arm_mount_offset)
            .chain(self.joint_pd_gains.iter().flat_map(|g| [g.kp, g.kd]))
            .all(f64::is_finite);
        if !finite {
            return bad("parameters must be finite");
        }
        if self.mass_base <= 0.0 {
            return bad("mass_base must be > 0");
        }
        if self.inertia.iter().any(|&j| j <= 0.0) {
            return bad("inertia diagonal entries must be > 0");
        }
        if self.gravity <= 0.0 {
            return bad("gravity must be > 0");
        }
        if self.payload_mass < 0.0 {
            return bad("payload_mass must be >= 0");
        }
        if self.arm_link_masses.iter().any(|&m| m < 0.0) {
            return bad("arm_link_masses must be >= 0");
        }
        if self.force_max < 0.0 || self.moment_max < 0.0 {
            return bad("force_max and moment_max must be >= 0");
        }
        if !(self.thrust_to_weight_max > 0.0) {
            return bad("thrust_to_weight_max must be > 0");
        }
        Ok(())
    }

    pub fn inertia_matrix(&self) -> Mat3 {
        Mat3::from_diagonal(&Vec3::from(self.inertia))
    }

    pub fn arm_mass(&self) -> f64 {
        self.arm_link_masses.iter().sum()
    }

    pub fn thrust_max(&self, payload_attached: bool) -> f64 {
        self.thrust_to_weight_max * total_mass(self, payload_attached) * self.gravity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vec3,
    pub velocity: Vec3,
    /// Body-to-world rotation.
    pub attitude: Mat3,
    pub body_rates: Vec3,
    pub arm_angles: [f64; ARM_JOINTS],
    pub arm_rates: [f64; ARM_JOINTS],
    pub payload_attached: bool,
}

impl Default for VehicleState {
    fn default() -> Self {
        Self {
            position: Vec3::zeros(),
            velocity: Vec3::zeros(),
            attitude: Mat3::identity(),
            body_rates: Vec3::zeros(),
            arm_angles: [0.0; 3],
            arm_rates: [0.0; 3],
            payload_attached: false,
        }
    }
}

impl VehicleState {
    pub fn at_position(position: Vec3) -> Self {
        Self { position, ..Self::default() }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|x| x.is_finite())
            && self.velocity.iter().all(|x| x.is_finite())
            && self.attitude.iter().all(|x| x.is_finite())
            && self.body_rates.iter().all(|x| x.is_finite())
            && self.arm_angles.iter().all(|x| x.is_finite())
            && self.arm_rates.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInputs {
    /// Collective thrust, N.
    pub thrust: f64,
    /// Body torque, N·m.
    pub torque: Vec3,
    pub arm_commands: [f64; ARM_JOINTS],
}

impl Default for ControlInputs {
    fn default() -> Self {
        Self { thrust: 0.0, torque: Vec3::zeros(), arm_commands: [0.0; 3] }
    }
}

/// Disturbance the arm exerts on the base: `force` is a world-frame
/// acceleration added to `v̇`, `moment` a body-frame angular acceleration
/// added to `Ω̇`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CouplingWrench {
    pub force: Vec3,
    pub moment: Vec3,
}

impl CouplingWrench {
    pub const ZERO: Self = Self {
        force: Vec3::new(0.0, 0.0, 0.0),
        moment: Vec3::new(0.0, 0.0, 0.0),
    };

    /// Scales each part down to its bound if it exceeds it.
    pub fn clamped(self, force_max: f64, moment_max: f64) -> Self {
        Self {
            force: clamp_norm(self.force, force_max),
            moment: clamp_norm(self.moment, moment_max),
        }
    }

    pub fn add(self, other: Self) -> Self {
        Self { force: self.force + other.force, moment: self.moment + other.moment }
    }
}

fn clamp_norm(v: Vec3, max: f64) -> Vec3 {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Time derivative of [`VehicleState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub position: Vec3,
    pub velocity: Vec3,
    pub attitude: Mat3,
    pub body_rates: Vec3,
    pub arm_angles: [f64; ARM_JOINTS],
    pub arm_rates: [f64; ARM_JOINTS],
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(&'static str),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("thrust must be >= 0, got {0}")]
    NegativeThrust(f64),
}

pub fn total_mass(params: &VehicleParams, payload_attached: bool) -> f64 {
    let payload = if payload_attached { params.payload_mass } else { 0.0 };
    params.mass_base + params.arm_mass() + payload
}

/// Per-joint PD acceleration `q̈ᵢ = k_pᵢ(q_cmdᵢ − qᵢ) − k_dᵢ q̇ᵢ`.
pub fn arm_joint_accel(
    q: &[f64; ARM_JOINTS],
    qd: &[f64; ARM_JOINTS],
    q_cmd: &[f64; ARM_JOINTS],
    gains: &[JointGains; ARM_JOINTS],
) -> [f64; ARM_JOINTS] {
    std::array::from_fn(|i| gains[i].kp * (q_cmd[i] - q[i]) - gains[i].kd * qd[i])
}

/// Body-frame joint positions `[mount, j2, j3, tip]` of the serial chain.
///
/// Joint 1 turns about body z, joints 2 and 3 about the y axis of the
/// preceding link frame. Links point along [`STOWED_LINK_DIRECTION`] at zero.
pub fn arm_chain_points(q: &[f64; ARM_JOINTS], params: &VehicleParams) -> [Vec3; 4] {
    let stowed = Vec3::from(STOWED_LINK_DIRECTION);
    let frames = link_frames(q);
    let mut points = [Vec3::from(params.arm_mount_offset); 4];
    for i in 0..ARM_JOINTS {
        points[i + 1] = points[i] + params.arm_link_lengths[i] * (frames[i] * stowed);
    }
    points
}

fn link_frames(q: &[f64; ARM_JOINTS]) -> [Mat3; ARM_JOINTS] {
    let rz = |a: f64| {
        let (s, c) = a.sin_cos();
        Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    };
    let ry = |a: f64| {
        let (s, c) = a.sin_cos();
        Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    };
    let r1 = rz(q[0]);
    let r2 = r1 * ry(q[1]);
    let r3 = r2 * ry(q[2]);
    [r1, r2, r3]
}

/// Composite center of mass of the arm in the body frame. Falls back to the
/// mount point when the arm is massless.
pub fn arm_com_body(q: &[f64; ARM_JOINTS], params: &VehicleParams) -> Vec3 {
    let mount = Vec3::from(params.arm_mount_offset);
    let m_arm = params.arm_mass();
    if m_arm <= 0.0 {
        return mount;
    }
    let pts = arm_chain_points(q, params);
    let weighted = (0..ARM_JOINTS).fold(Vec3::zeros(), |acc, i| {
        let mid = 0.5 * (pts[i] + pts[i + 1]);
        acc + params.arm_link_masses[i] * (mid - mount)
    });
    mount + weighted / m_arm
}

/// Quasi-static arm disturbance.
///
/// The moment is the gravity torque of the offset arm CoM mapped through
/// `J⁻¹`. The force is the reaction to the CoM acceleration, taken as a
/// central second difference of [`arm_com_body`] along the joint trajectory
/// with step `h`. Both parts are clamped to the configured bounds.
pub fn coupling_wrench(
    state: &VehicleState,
    qdd: &[f64; ARM_JOINTS],
    params: &VehicleParams,
    h: f64,
) -> CouplingWrench {
    let m_arm = params.arm_mass();
    if m_arm <= 0.0 {
        return CouplingWrench::ZERO;
    }
    let q = &state.arm_angles;
    let qd = &state.arm_rates;
    let r_com = arm_com_body(q, params);

    let gravity_body = state.attitude.transpose() * Vec3::new(0.0, 0.0, m_arm * params.gravity);
    let inv_inertia = Vec3::from(params.inertia).map(|j| 1.0 / j);
    let moment = r_com.cross(&gravity_body).component_mul(&inv_inertia);

    let force = if h > 0.0 && (qd.iter().chain(qdd).any(|x| *x != 0.0)) {
        let fwd: [f64; 3] = std::array::from_fn(|i| q[i] + qd[i] * h + 0.5 * qdd[i] * h * h);
        let back: [f64; 3] = std::array::from_fn(|i| q[i] - qd[i] * h + 0.5 * qdd[i] * h * h);
        let accel_body =
            (arm_com_body(&fwd, params) - 2.0 * r_com + arm_com_body(&back, params)) / (h * h);
        let m_total = total_mass(params, state.payload_attached);
        -(m_arm / m_total) * (state.attitude * accel_body)
    } else {
        Vec3::zeros()
    };

    CouplingWrench { force, moment }.clamped(params.force_max, params.moment_max)
}

/// Right-hand side of the closed set of state equations for a given wrench.
pub fn derivatives(
    state: &VehicleState,
    inputs: &ControlInputs,
    params: &VehicleParams,
    wrench: &CouplingWrench,
) -> Result<StateDerivative, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !inputs.thrust.is_finite()
        || inputs.torque.iter().any(|x| !x.is_finite())
        || inputs.arm_commands.iter().any(|x| !x.is_finite())
    {
        return Err(DynamicsError::NonFinite("control inputs"));
    }
    if wrench.force.iter().chain(wrench.moment.iter()).any(|x| !x.is_finite()) {
        return Err(DynamicsError::NonFinite("coupling wrench"));
    }
    if inputs.thrust < 0.0 {
        return Err(DynamicsError::NegativeThrust(inputs.thrust));
    }

    let e3 = Vec3::z();
    let mass = total_mass(params, state.payload_attached);
    let r = &state.attitude;
    let omega = &state.body_rates;
    let inertia = Vec3::from(params.inertia);
    let j_omega = omega.component_mul(&inertia);

    let v_dot = params.gravity * e3 - (inputs.thrust / mass) * (r * e3) + wrench.force;
    let omega_dot = (-omega.cross(&j_omega) + inputs.torque).component_div(&inertia) + wrench.moment;
    let qdd = arm_joint_accel(
        &state.arm_angles,
        &state.arm_rates,
        &inputs.arm_commands,
        &params.joint_pd_gains,
    );

    Ok(StateDerivative {
        position: state.velocity,
        velocity: v_dot,
        attitude: r * hat(omega),
        body_rates: omega_dot,
        arm_angles: state.arm_rates,
        arm_rates: qdd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{rotation_from_euler, EulerAngles};
    use approx::assert_relative_eq;

    fn massless_arm() -> VehicleParams {
        VehicleParams { arm_link_masses: [0.0; 3], ..VehicleParams::default() }
    }

    fn hover_inputs(params: &VehicleParams, state: &VehicleState) -> ControlInputs {
        ControlInputs {
            thrust: total_mass(params, state.payload_attached) * params.gravity,
            ..ControlInputs::default()
        }
    }

    #[test]
    fn total_mass_examples() {
        let p = VehicleParams::default();
        assert_relative_eq!(total_mass(&p, false), 1.65, epsilon = 1e-12);
        assert_relative_eq!(total_mass(&p, true), 1.81, epsilon = 1e-12);
        assert_eq!(total_mass(&massless_arm(), false), 1.5);
    }

    #[test]
    fn joint_accel_examples() {
        let g = [JointGains { kp: 4.0, kd: 2.0 }; 3];
        let q = [0.3, -0.2, 0.1];
        assert_eq!(arm_joint_accel(&q, &[0.0; 3], &q, &g), [0.0; 3]);
        assert_eq!(arm_joint_accel(&[0.0; 3], &[0.0; 3], &[1.0, 0.0, 0.0], &g), [4.0, 0.0, 0.0]);
    }

    #[test]
    fn joint_pd_critically_damped_does_not_overshoot() {
        // q'' = -4q - 4q', q(0)=1, q'(0)=0 has q(t) = (1 + 2t) e^{-2t} > 0.
        let g = [JointGains { kp: 4.0, kd: 4.0 }; 3];
        let (mut q, mut qd) = (1.0_f64, 0.0_f64);
        let dt = 1e-3;
        let mut min_q = f64::INFINITY;
        for step in 1..=10_000 {
            let f = |q: f64, qd: f64| (qd, arm_joint_accel(&[q, 0.0, 0.0], &[qd, 0.0, 0.0], &[0.0; 3], &g)[0]);
            let k1 = f(q, qd);
            let k2 = f(q + 0.5 * dt * k1.0, qd + 0.5 * dt * k1.1);
            let k3 = f(q + 0.5 * dt * k2.0, qd + 0.5 * dt * k2.1);
            let k4 = f(q + dt * k3.0, qd + dt * k3.1);
            q += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            qd += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            min_q = min_q.min(q);
            let t = step as f64 * dt;
            assert_relative_eq!(q, (1.0 + 2.0 * t) * (-2.0 * t).exp(), epsilon = 1e-9);
        }
        assert!(min_q > -1e-9);
    }

    #[test]
    fn joints_are_decoupled() {
        let g = VehicleParams::default().joint_pd_gains;
        let q = [0.1, 0.2, 0.3];
        let qd = [0.0, -0.5, 0.5];
        let a = arm_joint_accel(&q, &qd, &[0.0, 0.0, 0.0], &g);
        let b = arm_joint_accel(&q, &qd, &[1.0, 0.0, 0.0], &g);
        assert_ne!(a[0], b[0]);
        assert_eq!(a[1..], b[1..]);
    }

    #[test]
    fn arm_com_examples() {
        assert_eq!(arm_com_body(&[0.4, 0.5, 0.6], &massless_arm()), Vec3::new(0.0, 0.0, 0.05));

        let p = VehicleParams::default();
        // Midpoints at -0.05, -0.15, -0.25 below the mount, equal masses.
        let mids = [-0.05, -0.15, -0.25];
        let oracle = 0.05 + mids.iter().sum::<f64>() / 3.0;
        let com = arm_com_body(&[0.0; 3], &p);
        assert_relative_eq!(com, Vec3::new(0.0, 0.0, oracle), epsilon = 1e-15);
        assert_relative_eq!(com.z, 0.05 - 0.15, epsilon = 1e-15);
    }

    #[test]
    fn arm_com_joint1_half_turn_symmetry() {
        let p = VehicleParams::default();
        let a = arm_com_body(&[0.2, 0.7, -0.4], &p);
        let b = arm_com_body(&[0.2 + std::f64::consts::PI, 0.7, -0.4], &p);
        let mount = Vec3::from(p.arm_mount_offset);
        assert_relative_eq!(a.z, b.z, epsilon = 1e-12);
        assert_relative_eq!(a.x - mount.x, -(b.x - mount.x), epsilon = 1e-12);
        assert_relative_eq!(a.y - mount.y, -(b.y - mount.y), epsilon = 1e-12);
    }

    #[test]
    fn arm_com_bent_chain_by_direct_summation() {
        // q2 = π/2 lays links 2 and 3 along body -x.
        let p = VehicleParams::default();
        let com = arm_com_body(&[0.0, std::f64::consts::FRAC_PI_2, 0.0], &p);
        let mids = [
            Vec3::new(0.0, 0.0, 0.05 - 0.05),
            Vec3::new(-0.05, 0.0, 0.05 - 0.10),
            Vec3::new(-0.15, 0.0, 0.05 - 0.10),
        ];
        let oracle = (mids[0] + mids[1] + mids[2]) / 3.0;
        assert_relative_eq!(com, oracle, epsilon = 1e-15);
    }

    #[test]
    fn coupling_wrench_examples() {
        let state = VehicleState::default();
        // Stowed arm sits on the body z axis.
        let w = coupling_wrench(&state, &[0.0; 3], &VehicleParams::default(), 0.002);
        assert_eq!(w.moment, Vec3::zeros());
        assert_eq!(w.force, Vec3::zeros());

        let moving = VehicleState { arm_rates: [1.0, 2.0, 3.0], ..VehicleState::default() };
        let w = coupling_wrench(&moving, &[5.0; 3], &massless_arm(), 0.002);
        assert_eq!(w, CouplingWrench::ZERO);
    }

    #[test]
    fn coupling_moment_from_offset_com() {
        // Single link of 0.15 kg whose midpoint lands at (0.1, 0, 0).
        let p = VehicleParams {
            arm_link_masses: [0.15, 0.0, 0.0],
            arm_link_lengths: [0.2, 0.0, 0.0],
            arm_mount_offset: [0.1, 0.0, 0.1],
            ..VehicleParams::default()
        };
        assert_relative_eq!(arm_com_body(&[0.0; 3], &p), Vec3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
        let w = coupling_wrench(&VehicleState::default(), &[0.0; 3], &p, 0.002);
        // J⁻¹ (0.1,0,0) × (0,0,0.15·9.81)
        let oracle = Vec3::new(0.0, -0.1 * 0.15 * 9.81 / 0.03, 0.0);
        assert_relative_eq!(w.moment, oracle, epsilon = 1e-12);
        assert_relative_eq!(w.moment.y, -4.905, epsilon = 1e-12);
        assert_eq!(w.force, Vec3::zeros());
    }

    #[test]
    fn coupling_wrench_respects_bounds() {
        let p = VehicleParams { force_max: 0.1, moment_max: 0.5, ..VehicleParams::default() };
        let state = VehicleState {
            attitude: rotation_from_euler(&EulerAngles::new(0.3, 0.2, 0.0)),
            arm_angles: [0.3, 1.2, 0.8],
            arm_rates: [4.0, -6.0, 8.0],
            ..VehicleState::default()
        };
        let w = coupling_wrench(&state, &[50.0, -80.0, 30.0], &p, 0.002);
        assert!(w.force.norm() <= 0.1 + 1e-12);
        assert!(w.moment.norm() <= 0.5 + 1e-12);
        assert!(w.force.norm() > 0.0);
    }

    #[test]
    fn hover_is_equilibrium() {
        let p = VehicleParams::default();
        let s = VehicleState::default();
        let d = derivatives(&s, &hover_inputs(&p, &s), &p, &CouplingWrench::ZERO).unwrap();
        assert!(d.velocity.norm() < 1e-12);
        assert_eq!(d.position, Vec3::zeros());
        assert_eq!(d.attitude, Mat3::zeros());
        assert_eq!(d.body_rates, Vec3::zeros());
    }

    #[test]
    fn free_fall_accelerates_down() {
        let p = VehicleParams::default();
        let d = derivatives(&VehicleState::default(), &ControlInputs::default(), &p, &CouplingWrench::ZERO)
            .unwrap();
        assert_eq!(d.velocity, Vec3::new(0.0, 0.0, 9.81));
    }

    #[test]
    fn spin_about_principal_axis_has_no_gyroscopic_term() {
        let p = VehicleParams::default();
        let s = VehicleState { body_rates: Vec3::new(0.0, 0.0, 1.0), ..VehicleState::default() };
        let d = derivatives(&s, &hover_inputs(&p, &s), &p, &CouplingWrench::ZERO).unwrap();
        assert_eq!(d.body_rates, Vec3::zeros());
    }

    #[test]
    fn attitude_rate_is_skew_after_transport() {
        let p = VehicleParams::default();
        let s = VehicleState {
            attitude: rotation_from_euler(&EulerAngles::new(0.4, -0.3, 2.0)),
            body_rates: Vec3::new(0.7, -1.1, 0.3),
            ..VehicleState::default()
        };
        let d = derivatives(&s, &ControlInputs::default(), &p, &CouplingWrench::ZERO).unwrap();
        let w = d.attitude * s.attitude.transpose();
        let sym = w + w.transpose();
        assert!(sym.amax() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = VehicleParams::default();
        let s = VehicleState::default();
        let neg = ControlInputs { thrust: -1.0, ..ControlInputs::default() };
        assert_eq!(
            derivatives(&s, &neg, &p, &CouplingWrench::ZERO),
            Err(DynamicsError::NegativeThrust(-1.0))
        );
        let nan = ControlInputs { thrust: f64::NAN, ..ControlInputs::default() };
        assert!(matches!(derivatives(&s, &nan, &p, &CouplingWrench::ZERO), Err(DynamicsError::NonFinite(_))));
        let mut bad = s.clone();
        bad.velocity.x = f64::INFINITY;
        assert!(derivatives(&bad, &ControlInputs::default(), &p, &CouplingWrench::ZERO).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(VehicleParams::default().validate().is_ok());
        let p = VehicleParams { mass_base: 0.0, ..VehicleParams::default() };
        assert!(p.validate().is_err());
        let p = VehicleParams { inertia: [0.03, -1.0, 0.06], ..VehicleParams::default() };
        assert!(p.validate().is_err());
        let p = VehicleParams { payload_mass: -0.1, ..VehicleParams::default() };
        assert!(p.validate().is_err());
    }
}
