//! The mirrored twin: ingests `/servo` and `/data`, renders a smooth state
//! between messages and scores how faithfully it followed the robot.

use crate::bridge::capture::{pose_trace, CaptureLine};
use crate::bridge::codec::{decode_frame, CanonicalWriter, CodecError};
use crate::bridge::estimate::{estimate_delay, DelayEstimate, EstimateError, EstimatorConfig, Trace};
use crate::bridge::frame::{ArmMessage, BridgeFrame, Op, Payload, PoseMessage, Topic};
use crate::se3::{euler_from_rotation, exp_so3, log_so3, rotation_from_euler, EulerAngles, Vec3};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::RwLock;

/// Longest time the render state may run ahead of the newest message.
pub const MAX_EXTRAPOLATION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamped<T> {
    /// Receive time on the twin clock.
    pub rx: f64,
    pub seq: u64,
    pub stamp_tx: f64,
    pub msg: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TwinCounters {
    pub received: u64,
    pub applied: u64,
    /// Out-of-order frames (seq not newer than the current one).
    pub stale: u64,
    /// Frames that failed decoding or do not belong to the twin.
    pub rejected: u64,
}

impl TwinCounters {
    pub fn dropped(&self) -> u64 {
        self.stale + self.rejected
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied,
    Stale,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderState {
    pub position: [f64; 3],
    pub euler: [f64; 3],
    pub joints: [f64; 3],
    pub payload_attached: bool,
    /// Query is more than [`MAX_EXTRAPOLATION`] past the newest pose.
    pub stale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AvatarError {
    #[error("no telemetry received yet")]
    NoData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TwinState {
    pose: [Option<Stamped<PoseMessage>>; 2],
    arm: [Option<Stamped<ArmMessage>>; 2],
    counters: TwinCounters,
}

fn push<T>(slots: &mut [Option<Stamped<T>>; 2], sample: Stamped<T>) -> bool {
    if slots[1].as_ref().is_some_and(|last| sample.seq <= last.seq) {
        return false;
    }
    slots[0] = slots[1].take();
    slots[1] = Some(sample);
    true
}

fn lerp(a: [f64; 3], b: [f64; 3], w: f64) -> [f64; 3] {
    std::array::from_fn(|k| a[k] + w * (b[k] - a[k]))
}

/// Weight of `t` between `a` and `b`, clamped to [0, 1].
fn weight(a: f64, b: f64, t: f64) -> f64 {
    if b > a {
        ((t - a) / (b - a)).clamp(0.0, 1.0)
    } else {
        1.0
    }
}

impl TwinState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counters(&self) -> TwinCounters {
        self.counters
    }

    pub fn latest_pose(&self) -> Option<&Stamped<PoseMessage>> {
        self.pose[1].as_ref()
    }

    pub fn latest_arm(&self) -> Option<&Stamped<ArmMessage>> {
        self.arm[1].as_ref()
    }

    /// Applies a decoded frame received at `rx`.
    pub fn apply_telemetry(&mut self, rx: f64, frame: &BridgeFrame) -> ApplyOutcome {
        self.counters.received += 1;
        let applied = match (frame.op, frame.topic, frame.msg) {
            (Op::Publish, Some(Topic::Servo), Payload::Pose(msg)) => {
                push(&mut self.pose, Stamped { rx, seq: frame.seq, stamp_tx: frame.stamp_tx, msg })
            }
            (Op::Publish, Some(Topic::Data), Payload::Arm(msg)) => {
                push(&mut self.arm, Stamped { rx, seq: frame.seq, stamp_tx: frame.stamp_tx, msg })
            }
            _ => {
                self.counters.rejected += 1;
                return ApplyOutcome::Rejected;
            }
        };
        if applied {
            self.counters.applied += 1;
            ApplyOutcome::Applied
        } else {
            self.counters.stale += 1;
            ApplyOutcome::Stale
        }
    }

    /// Decodes and applies raw wire bytes; decoding failures count as rejections.
    pub fn apply_bytes(&mut self, rx: f64, bytes: &[u8]) -> Result<ApplyOutcome, CodecError> {
        match decode_frame(bytes) {
            Ok(frame) => Ok(self.apply_telemetry(rx, &frame)),
            Err(e) => {
                self.counters.received += 1;
                self.counters.rejected += 1;
                Err(e)
            }
        }
    }

    pub fn render_state(&self, t: f64) -> Result<RenderState, AvatarError> {
        let latest = self.pose[1].as_ref().ok_or(AvatarError::NoData)?;
        let (position, attitude, stale) = match &self.pose[0] {
            _ if t > latest.rx + MAX_EXTRAPOLATION => (latest.msg.position, latest.msg.euler, true),
            _ if t >= latest.rx => {
                let dt = t - latest.rx;
                let p = std::array::from_fn(|k| latest.msg.position[k] + dt * latest.msg.velocity[k]);
                (p, latest.msg.euler, false)
            }
            Some(prev) => {
                let w = weight(prev.rx, latest.rx, t);
                let ra = rotation_from_euler(&EulerAngles::from_array(prev.msg.euler));
                let rb = rotation_from_euler(&EulerAngles::from_array(latest.msg.euler));
                let r = ra * exp_so3(&(w * log_so3(&(ra.transpose() * rb))));
                let euler = if w == 1.0 {
                    latest.msg.euler
                } else if w == 0.0 {
                    prev.msg.euler
                } else {
                    euler_from_rotation(&r).angles.to_array()
                };
                (lerp(prev.msg.position, latest.msg.position, w), euler, false)
            }
            None => (latest.msg.position, latest.msg.euler, false),
        };
        let (joints, payload_attached) = match (&self.arm[0], &self.arm[1]) {
            (_, None) => ([0.0; 3], false),
            (Some(prev), Some(last)) if t < last.rx => {
                (lerp(prev.msg.joints, last.msg.joints, weight(prev.rx, last.rx, t)), last.msg.payload_attached)
            }
            (_, Some(last)) => (last.msg.joints, last.msg.payload_attached),
        };
        Ok(RenderState { position, euler: attitude, joints, payload_attached, stale })
    }
}

/// A twin shared between one ingest path and any number of readers. Every
/// read sees the state either before or after a whole update.
#[derive(Debug, Default)]
pub struct SharedTwin {
    inner: RwLock<TwinState>,
}

impl SharedTwin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply_telemetry(&self, rx: f64, frame: &BridgeFrame) -> ApplyOutcome {
        self.inner.write().unwrap_or_else(|e| e.into_inner()).apply_telemetry(rx, frame)
    }

    pub fn apply_bytes(&self, rx: f64, bytes: &[u8]) -> Result<ApplyOutcome, CodecError> {
        self.inner.write().unwrap_or_else(|e| e.into_inner()).apply_bytes(rx, bytes)
    }

    pub fn render_state(&self, t: f64) -> Result<RenderState, AvatarError> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).render_state(t)
    }

    pub fn snapshot(&self) -> TwinState {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    /// Residual position error after delay alignment, m.
    pub mean_error: f64,
    pub max_error: f64,
    pub compared: usize,
    pub delay: DelayEstimate,
    pub published: usize,
    pub received: usize,
    /// Publisher seq gaps within the twin's received range.
    pub lost: u64,
    /// Fraction of the twin window during which the render state was stale.
    pub staleness_fraction: f64,
}

impl FidelityReport {
    pub fn to_json(&self) -> Result<String, CodecError> {
        let mut w = CanonicalWriter::new();
        w.begin_object();
        w.number("mean_error", self.mean_error)?;
        w.number("max_error", self.max_error)?;
        w.integer("compared", self.compared as u64);
        w.number("delay", self.delay.lag)?;
        w.number("correlation", self.delay.correlation)?;
        for (k, lag) in ["delay_x", "delay_y", "delay_z"].into_iter().zip(self.delay.axis_lags) {
            w.optional_number(k, lag)?;
        }
        w.number("resample_interval", self.delay.resample_interval)?;
        let st = self.delay.stamp_latency;
        w.optional_number("stamp_latency_mean", st.map(|s| s.mean))?;
        w.optional_number("stamp_latency_p95", st.map(|s| s.p95))?;
        w.optional_number("disagreement", self.delay.disagreement)?;
        w.integer("published", self.published as u64);
        w.integer("received", self.received as u64);
        w.integer("lost", self.lost);
        w.number("staleness_fraction", self.staleness_fraction)?;
        w.end_object();
        Ok(w.finish())
    }
}

/// Seqs of `robot` inside the twin's [first, last] seq range that the twin never saw.
fn count_lost(robot: &Trace, twin: &Trace) -> u64 {
    let seen: BTreeSet<u64> = twin.samples.iter().map(|s| s.seq).collect();
    let (Some(&lo), Some(&hi)) = (seen.first(), seen.last()) else {
        return robot.samples.len() as u64;
    };
    robot.samples.iter().filter(|s| (lo..=hi).contains(&s.seq) && !seen.contains(&s.seq)).count() as u64
}

fn staleness_fraction(twin: &Trace) -> f64 {
    let Some((t0, t1)) = twin.span() else {
        return 1.0;
    };
    if t1 <= t0 {
        return 0.0;
    }
    let stale: f64 = twin.samples.windows(2).map(|w| (w[1].t - w[0].t - MAX_EXTRAPOLATION).max(0.0)).sum();
    stale / (t1 - t0)
}

pub fn fidelity_report(
    robot: &[CaptureLine],
    twin: &[CaptureLine],
    config: &EstimatorConfig,
) -> Result<FidelityReport, EstimateError> {
    let robot_trace = pose_trace(robot);
    let twin_trace = pose_trace(twin);
    let delay = estimate_delay(&robot_trace, &twin_trace, config)?;
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut compared = 0;
    for s in &robot_trace.samples {
        if let Some(p) = twin_trace.position_at(s.t + delay.lag) {
            let e = (Vec3::from(p) - Vec3::from(s.position)).norm();
            sum += e;
            max = max.max(e);
            compared += 1;
        }
    }
    if compared == 0 {
        return Err(EstimateError::NoOverlap);
    }
    Ok(FidelityReport {
        mean_error: sum / compared as f64,
        max_error: max,
        compared,
        published: robot_trace.samples.len(),
        received: twin_trace.samples.len(),
        lost: count_lost(&robot_trace, &twin_trace),
        staleness_fraction: staleness_fraction(&twin_trace),
        delay,
    })
}

pub const PAIRED_CSV_HEADER: &str = "t,robot_x,robot_y,robot_z,twin_x,twin_y,twin_z";

/// Robot and twin positions at each robot sample time, without alignment,
/// so the delay shows in the overlay. Twin cells are empty outside its span.
pub fn paired_trace_csv(robot: &[CaptureLine], twin: &[CaptureLine]) -> String {
    let robot = pose_trace(robot);
    let twin = pose_trace(twin);
    let mut out = String::with_capacity(64 * (robot.samples.len() + 1));
    out.push_str(PAIRED_CSV_HEADER);
    out.push('\n');
    for s in &robot.samples {
        let [x, y, z] = s.position;
        let _ = write!(out, "{},{x},{y},{z}", s.t);
        match twin.position_at(s.t) {
            Some([a, b, c]) => {
                let _ = writeln!(out, ",{a},{b},{c}");
            }
            None => out.push_str(",,,\n"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::frame::BridgeFrame;

    fn pose(seq: u64, t: f64, position: [f64; 3], euler: [f64; 3]) -> BridgeFrame {
        BridgeFrame::publish(Topic::Servo, seq, t, Payload::Pose(PoseMessage { position, euler, velocity: [0.0; 3] }))
    }

    #[test]
    fn no_data_before_first_message() {
        assert_eq!(TwinState::new().render_state(0.0), Err(AvatarError::NoData));
    }

    #[test]
    fn first_pose_is_exact_and_stale_seq_is_dropped() {
        let mut twin = TwinState::new();
        let f = pose(5, 1.0, [0.1, 0.2, -2.0], [0.0, 0.1, 0.3]);
        assert_eq!(twin.apply_telemetry(1.0, &f), ApplyOutcome::Applied);
        let r = twin.render_state(1.0).unwrap();
        assert_eq!(r.position, [0.1, 0.2, -2.0]);
        assert_eq!(r.euler, [0.0, 0.1, 0.3]);
        let before = twin.clone();
        assert_eq!(twin.apply_telemetry(1.1, &pose(4, 0.9, [9.0; 3], [0.0; 3])), ApplyOutcome::Stale);
        assert_eq!(twin.latest_pose(), before.latest_pose());
        assert_eq!(twin.counters().stale, 1);
    }

    #[test]
    fn grasp_flag_flips_payload() {
        let mut twin = TwinState::new();
        twin.apply_telemetry(0.0, &pose(0, 0.0, [0.0; 3], [0.0; 3]));
        let arm = |seq, attached| {
            BridgeFrame::publish(Topic::Data, seq, 0.0, Payload::Arm(ArmMessage { joints: [0.0, 0.8, 0.6], payload_attached: attached }))
        };
        twin.apply_telemetry(0.0, &arm(0, false));
        assert!(!twin.render_state(0.0).unwrap().payload_attached);
        twin.apply_telemetry(0.02, &arm(1, true));
        let r = twin.render_state(0.02).unwrap();
        assert!(r.payload_attached);
        assert_eq!(r.joints, [0.0, 0.8, 0.6]);
    }

    #[test]
    fn interpolation_and_staleness() {
        let mut twin = TwinState::new();
        twin.apply_telemetry(0.0, &pose(0, 0.0, [0.0; 3], [0.0; 3]));
        twin.apply_telemetry(0.02, &pose(1, 0.02, [1.0, 0.0, 0.0], [0.0, 0.0, 0.4]));
        let mid = twin.render_state(0.01).unwrap();
        assert_eq!(mid.position, [0.5, 0.0, 0.0]);
        assert!((mid.euler[2] - 0.2).abs() < 1e-12);
        assert_eq!(twin.render_state(0.0).unwrap().position, [0.0; 3]);
        assert_eq!(twin.render_state(0.02).unwrap().position, [1.0, 0.0, 0.0]);
        let late = twin.render_state(1.02).unwrap();
        assert!(late.stale);
        assert_eq!(late.position, [1.0, 0.0, 0.0]);
        assert!(!twin.render_state(0.22).unwrap().stale);
    }

    #[test]
    fn extrapolation_uses_velocity_within_limit() {
        let mut twin = TwinState::new();
        let f = BridgeFrame::publish(
            Topic::Servo,
            0,
            0.0,
            Payload::Pose(PoseMessage { position: [0.0; 3], euler: [0.0; 3], velocity: [1.0, 0.0, 0.0] }),
        );
        twin.apply_telemetry(0.0, &f);
        let r = twin.render_state(0.1).unwrap();
        assert!((r.position[0] - 0.1).abs() < 1e-15 && !r.stale);
        assert_eq!(twin.render_state(0.3).unwrap().position, [0.0; 3]);
    }

    #[test]
    fn attitude_takes_the_short_way_across_pi() {
        let mut twin = TwinState::new();
        twin.apply_telemetry(0.0, &pose(0, 0.0, [0.0; 3], [0.0, 0.0, 3.0]));
        twin.apply_telemetry(1.0, &pose(1, 1.0, [0.0; 3], [0.0, 0.0, -3.0]));
        let yaw = twin.render_state(0.5).unwrap().euler[2];
        assert!((yaw.abs() - std::f64::consts::PI).abs() < 1e-9, "{yaw}");
    }

    #[test]
    fn counters_add_up() {
        let mut twin = TwinState::new();
        twin.apply_telemetry(0.0, &pose(1, 0.0, [0.0; 3], [0.0; 3]));
        twin.apply_telemetry(0.0, &pose(1, 0.0, [0.0; 3], [0.0; 3]));
        twin.apply_telemetry(0.0, &BridgeFrame::ping(0, 0.0));
        assert!(twin.apply_bytes(0.0, b"{").is_err());
        let c = twin.counters();
        assert_eq!(c, TwinCounters { received: 4, applied: 1, stale: 1, rejected: 2 });
        assert_eq!(c.applied + c.dropped(), c.received);
    }

    fn capture(shift: f64, keep: impl Fn(u64) -> bool) -> Vec<CaptureLine> {
        (0..1500u64)
            .filter(|i| keep(*i))
            .map(|i| {
                let t = i as f64 * 0.02;
                let p = [(0.7 * t).sin() + 0.3 * (1.9 * t).sin(), 0.5 * (0.45 * t).cos(), -2.0 + 0.4 * (0.9 * t).sin()];
                CaptureLine { rx: t + shift, frame: pose(i, t, p, [0.0; 3]) }
            })
            .collect()
    }

    #[test]
    fn identical_captures() {
        let r = capture(0.0, |_| true);
        let rep = fidelity_report(&r, &r, &EstimatorConfig::default()).unwrap();
        assert!(rep.delay.lag.abs() < 1e-9);
        assert_eq!(rep.max_error, 0.0);
        assert_eq!(rep.lost, 0);
        assert_eq!(rep.staleness_fraction, 0.0);
    }

    #[test]
    fn shifted_capture() {
        let cfg = EstimatorConfig::default();
        let rep = fidelity_report(&capture(0.0, |_| true), &capture(0.5, |_| true), &cfg).unwrap();
        assert!((rep.delay.lag - 0.5).abs() <= cfg.resample_interval);
        // peak speed ≈ 1.3 m/s; one interpolation interval of motion
        assert!(rep.max_error < 1.3 * 0.02, "{}", rep.max_error);
        assert!(rep.mean_error < 0.005);
        let json = rep.to_json().unwrap();
        assert!(json.starts_with("{\"mean_error\":"));
        serde_json::from_str::<serde_json::Value>(&json).unwrap();
    }

    #[test]
    fn every_other_frame_dropped() {
        let robot = capture(0.0, |_| true);
        let twin = capture(0.5, |i| i % 2 == 0);
        let rep = fidelity_report(&robot, &twin, &EstimatorConfig::default()).unwrap();
        assert_eq!(rep.lost, 749);
        assert_eq!(rep.published, 1500);
        assert_eq!(rep.received, 750);
    }

    #[test]
    fn flat_capture_is_rejected() {
        let flat: Vec<_> = (0..200).map(|i| CaptureLine { rx: i as f64 * 0.02, frame: pose(i, 0.0, [1.0; 3], [0.0; 3]) }).collect();
        assert!(matches!(
            fidelity_report(&flat, &flat, &EstimatorConfig::default()),
            Err(EstimateError::InsufficientExcitation { .. })
        ));
    }

    #[test]
    fn paired_csv_rows() {
        let csv = paired_trace_csv(&capture(0.0, |_| true), &capture(0.5, |_| true));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(PAIRED_CSV_HEADER));
        assert!(lines.next().unwrap().ends_with(",,,"));
        assert_eq!(csv.lines().count(), 1501);
        assert!(csv.lines().last().unwrap().split(',').all(|c| !c.is_empty()));
    }

    #[test]
    fn concurrent_reads_never_tear() {
        use std::sync::Arc;
        let twin = Arc::new(SharedTwin::new());
        twin.apply_telemetry(0.0, &pose(0, 0.0, [0.0; 3], [0.0; 3]));
        let writer = {
            let twin = twin.clone();
            std::thread::spawn(move || {
                for i in 1..2000u64 {
                    let v = i as f64;
                    twin.apply_telemetry(v, &pose(i, v, [v, v, v], [0.0; 3]));
                }
            })
        };
        for _ in 0..2000 {
            let p = twin.render_state(1e9).unwrap().position;
            assert!(p[0] == p[1] && p[1] == p[2]);
        }
        writer.join().unwrap();
    }
}
