//! Frame and message types carried by the bridge.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Advertise,
    Subscribe,
    Publish,
    Unsubscribe,
    Ping,
    Pong,
}

impl Op {
    pub const ALL: [Op; 6] = [Op::Advertise, Op::Subscribe, Op::Publish, Op::Unsubscribe, Op::Ping, Op::Pong];

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Advertise => "advertise",
            Op::Subscribe => "subscribe",
            Op::Publish => "publish",
            Op::Unsubscribe => "unsubscribe",
            Op::Ping => "ping",
            Op::Pong => "pong",
        }
    }
}

impl FromStr for Op {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Op::ALL.into_iter().find(|op| op.as_str() == s).ok_or(())
    }
}

/// The fixed topic registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Topic {
    /// Robot pose, robot → avatar.
    Servo,
    /// Arm joints and payload flag, robot → avatar.
    Data,
    /// Operator commands, operator → robot.
    Teleop,
    /// Bridge latency statistics, bridge → observers.
    Metrics,
}

impl Topic {
    pub const ALL: [Topic; 4] = [Topic::Servo, Topic::Data, Topic::Teleop, Topic::Metrics];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::Servo => "/servo",
            Topic::Data => "/data",
            Topic::Teleop => "/teleop",
            Topic::Metrics => "/metrics",
        }
    }
}

impl FromStr for Topic {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Topic::ALL.into_iter().find(|t| t.as_str() == s).ok_or(())
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `/servo` body. Euler angles are ZYX roll, pitch, yaw.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseMessage {
    pub position: [f64; 3],
    pub euler: [f64; 3],
    pub velocity: [f64; 3],
}

/// `/data` body.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ArmMessage {
    pub joints: [f64; 3],
    pub payload_attached: bool,
}

/// `/teleop` body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommandMessage {
    /// Move the position setpoint by `delta` and the yaw setpoint by `yaw`.
    Nudge { delta: [f64; 3], yaw: f64 },
    /// Absolute position and yaw setpoint.
    Setpoint { position: [f64; 3], yaw: f64 },
    Arm { joints: [f64; 3] },
    Grasp,
    Release,
}

impl CommandMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            CommandMessage::Nudge { .. } => "nudge",
            CommandMessage::Setpoint { .. } => "setpoint",
            CommandMessage::Arm { .. } => "arm",
            CommandMessage::Grasp => "grasp",
            CommandMessage::Release => "release",
        }
    }
}

/// `/metrics` body: one-way latency measured at the bridge over the last
/// reporting window, next to the configured injection.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsMessage {
    pub window: f64,
    pub samples: u64,
    pub latency_mean: f64,
    pub latency_p95: f64,
    pub injected_delay: f64,
    pub injected_jitter: f64,
    pub dropped: u64,
}

/// Session clock announcement sent by the server in a `pong` right after a
/// client connects. `stamp_tx` of that frame is the server session time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClockSync {
    pub epoch_unix: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Payload {
    #[default]
    None,
    Pose(PoseMessage),
    Arm(ArmMessage),
    Command(CommandMessage),
    Metrics(MetricsMessage),
    Clock(ClockSync),
}

impl Payload {
    /// Topic whose publishes must carry this payload kind.
    pub fn topic(&self) -> Option<Topic> {
        match self {
            Payload::Pose(_) => Some(Topic::Servo),
            Payload::Arm(_) => Some(Topic::Data),
            Payload::Command(_) => Some(Topic::Teleop),
            Payload::Metrics(_) => Some(Topic::Metrics),
            Payload::None | Payload::Clock(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeFrame {
    pub op: Op,
    /// `None` encodes as the empty topic used by ping/pong.
    pub topic: Option<Topic>,
    pub seq: u64,
    /// Sender session time, seconds.
    pub stamp_tx: f64,
    pub msg: Payload,
}

impl BridgeFrame {
    pub fn publish(topic: Topic, seq: u64, stamp_tx: f64, msg: Payload) -> Self {
        Self { op: Op::Publish, topic: Some(topic), seq, stamp_tx, msg }
    }

    pub fn control(op: Op, topic: Topic, seq: u64, stamp_tx: f64) -> Self {
        Self { op, topic: Some(topic), seq, stamp_tx, msg: Payload::None }
    }

    pub fn ping(seq: u64, stamp_tx: f64) -> Self {
        Self { op: Op::Ping, topic: None, seq, stamp_tx, msg: Payload::None }
    }

    pub fn topic_str(&self) -> &'static str {
        self.topic.map_or("", Topic::as_str)
    }

    /// Structural rules shared by encoder and decoder.
    pub fn check_schema(&self) -> Result<(), String> {
        match self.op {
            Op::Ping | Op::Pong => {
                if self.topic.is_some() {
                    return Err(format!("{} frames use the empty topic", self.op.as_str()));
                }
                match (self.op, &self.msg) {
                    (_, Payload::None) | (Op::Pong, Payload::Clock(_)) => Ok(()),
                    _ => Err(format!("{} frame carries an unexpected msg", self.op.as_str())),
                }
            }
            Op::Advertise | Op::Subscribe | Op::Unsubscribe => {
                if self.topic.is_none() {
                    return Err(format!("{} needs a topic", self.op.as_str()));
                }
                if self.msg != Payload::None {
                    return Err(format!("{} frames carry msg null", self.op.as_str()));
                }
                Ok(())
            }
            Op::Publish => {
                let Some(topic) = self.topic else {
                    return Err("publish needs a topic".into());
                };
                if self.msg.topic() != Some(topic) {
                    return Err(format!("msg does not match the schema of {topic}"));
                }
                Ok(())
            }
        }
    }
}
