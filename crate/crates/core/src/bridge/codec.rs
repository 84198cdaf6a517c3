//! Canonical JSON text encoding of [`BridgeFrame`]s.
//!
//! Frames are written as `{"op":..,"topic":..,"seq":..,"stamp_tx":..,"msg":..}`
//! with no whitespace, message keys in a fixed order and numbers in the
//! shortest round-trip decimal form laid out like ECMAScript's
//! `Number.prototype.toString` (`1.5`, `0`, `1e+21`, `1e-7`). A browser's
//! `JSON.stringify` over objects built in the same key order produces the
//! same bytes.

use super::frame::{
    ArmMessage, BridgeFrame, ClockSync, CommandMessage, MetricsMessage, Op, Payload, PoseMessage, Topic,
};
use serde_json::{Map, Value};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("non-finite number in field `{0}`")]
    NonFinite(String),
    #[error("invalid frame: {0}")]
    Invalid(String),
    #[error("malformed JSON at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("schema mismatch at `{path}`: {reason}")]
    SchemaMismatch { path: String, reason: String },
}

/// Formats a finite number the way ECMAScript's `Number::toString` does.
pub fn format_number(v: f64) -> Option<String> {
    if !v.is_finite() {
        return None;
    }
    if v == 0.0 {
        return Some("0".into());
    }
    if v < 0.0 {
        return format_number(-v).map(|s| format!("-{s}"));
    }
    let sci = format!("{v:e}");
    let (mantissa, exp) = sci.split_once('e')?;
    let exp: i32 = exp.parse().ok()?;
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let k = digits.len() as i32;
    let n = exp + 1;
    let out = if k <= n && n <= 21 {
        format!("{digits}{}", "0".repeat((n - k) as usize))
    } else if 0 < n && n <= 21 {
        format!("{}.{}", &digits[..n as usize], &digits[n as usize..])
    } else if -6 < n && n <= 0 {
        format!("0.{}{digits}", "0".repeat((-n) as usize))
    } else {
        let sign = if n >= 1 { '+' } else { '-' };
        let e = (n - 1).abs();
        if k == 1 {
            format!("{digits}e{sign}{e}")
        } else {
            format!("{}.{}e{sign}{e}", &digits[..1], &digits[1..])
        }
    };
    Some(out)
}

/// Writer for canonical JSON objects with caller-controlled key order.
#[derive(Debug, Default)]
pub struct CanonicalWriter {
    out: String,
    need_comma: Vec<bool>,
}

impl CanonicalWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> String {
        self.out
    }

    fn sep(&mut self) {
        if let Some(flag) = self.need_comma.last_mut() {
            if *flag {
                self.out.push(',');
            }
            *flag = true;
        }
    }

    fn key(&mut self, k: &str) {
        self.sep();
        self.out.push('"');
        self.out.push_str(k);
        self.out.push_str("\":");
    }

    pub fn begin_object(&mut self) {
        self.out.push('{');
        self.need_comma.push(false);
    }

    pub fn begin_field_object(&mut self, k: &str) {
        self.key(k);
        self.begin_object();
    }

    pub fn end_object(&mut self) {
        self.need_comma.pop();
        self.out.push('}');
    }

    pub fn number(&mut self, k: &str, v: f64) -> Result<(), CodecError> {
        let s = format_number(v).ok_or_else(|| CodecError::NonFinite(k.to_string()))?;
        self.key(k);
        self.out.push_str(&s);
        Ok(())
    }

    pub fn optional_number(&mut self, k: &str, v: Option<f64>) -> Result<(), CodecError> {
        match v {
            Some(v) => self.number(k, v),
            None => {
                self.key(k);
                self.out.push_str("null");
                Ok(())
            }
        }
    }

    pub fn integer(&mut self, k: &str, v: u64) {
        self.key(k);
        let _ = write!(self.out, "{v}");
    }

    pub fn boolean(&mut self, k: &str, v: bool) {
        self.key(k);
        self.out.push_str(if v { "true" } else { "false" });
    }

    pub fn null(&mut self, k: &str) {
        self.key(k);
        self.out.push_str("null");
    }

    /// `v` must not need escaping; every string this crate writes comes from
    /// a fixed vocabulary.
    pub fn string(&mut self, k: &str, v: &str) {
        debug_assert!(!v.chars().any(|c| c == '"' || c == '\\' || c.is_control()));
        self.key(k);
        self.out.push('"');
        self.out.push_str(v);
        self.out.push('"');
    }

    pub fn numbers(&mut self, k: &str, vs: &[f64]) -> Result<(), CodecError> {
        let mut parts = Vec::with_capacity(vs.len());
        for (i, v) in vs.iter().enumerate() {
            parts.push(format_number(*v).ok_or_else(|| CodecError::NonFinite(format!("{k}[{i}]")))?);
        }
        self.key(k);
        self.out.push('[');
        self.out.push_str(&parts.join(","));
        self.out.push(']');
        Ok(())
    }
}

fn write_msg(w: &mut CanonicalWriter, msg: &Payload) -> Result<(), CodecError> {
    match msg {
        Payload::None => w.null("msg"),
        Payload::Pose(p) => {
            w.begin_field_object("msg");
            w.numbers("position", &p.position)?;
            w.numbers("euler", &p.euler)?;
            w.numbers("velocity", &p.velocity)?;
            w.end_object();
        }
        Payload::Arm(a) => {
            w.begin_field_object("msg");
            w.numbers("joints", &a.joints)?;
            w.boolean("payload_attached", a.payload_attached);
            w.end_object();
        }
        Payload::Command(c) => {
            w.begin_field_object("msg");
            w.string("kind", c.kind());
            match c {
                CommandMessage::Nudge { delta, yaw } => {
                    w.numbers("delta", delta)?;
                    w.number("yaw", *yaw)?;
                }
                CommandMessage::Setpoint { position, yaw } => {
                    w.numbers("position", position)?;
                    w.number("yaw", *yaw)?;
                }
                CommandMessage::Arm { joints } => w.numbers("joints", joints)?,
                CommandMessage::Grasp | CommandMessage::Release => {}
            }
            w.end_object();
        }
        Payload::Metrics(m) => {
            w.begin_field_object("msg");
            w.number("window", m.window)?;
            w.integer("samples", m.samples);
            w.number("latency_mean", m.latency_mean)?;
            w.number("latency_p95", m.latency_p95)?;
            w.number("injected_delay", m.injected_delay)?;
            w.number("injected_jitter", m.injected_jitter)?;
            w.integer("dropped", m.dropped);
            w.end_object();
        }
        Payload::Clock(c) => {
            w.begin_field_object("msg");
            w.number("epoch_unix", c.epoch_unix)?;
            w.end_object();
        }
    }
    Ok(())
}

/// Canonical text of `frame`.
pub fn encode_frame_str(frame: &BridgeFrame) -> Result<String, CodecError> {
    frame.check_schema().map_err(CodecError::Invalid)?;
    let mut w = CanonicalWriter::new();
    w.begin_object();
    w.string("op", frame.op.as_str());
    w.string("topic", frame.topic_str());
    w.integer("seq", frame.seq);
    w.number("stamp_tx", frame.stamp_tx)?;
    write_msg(&mut w, &frame.msg)?;
    w.end_object();
    Ok(w.finish())
}

pub fn encode_frame(frame: &BridgeFrame) -> Result<Vec<u8>, CodecError> {
    encode_frame_str(frame).map(String::into_bytes)
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut start = 0;
    for (i, chunk) in bytes.split(|b| *b == b'\n').enumerate() {
        if i + 1 == line {
            return (start + column.saturating_sub(1)).min(bytes.len());
        }
        start += chunk.len() + 1;
    }
    bytes.len()
}

fn mismatch(path: &str, reason: impl Into<String>) -> CodecError {
    CodecError::SchemaMismatch { path: path.to_string(), reason: reason.into() }
}

struct Fields<'a> {
    path: &'a str,
    map: &'a Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn new(path: &'a str, v: &'a Value, allowed: &[&str]) -> Result<Self, CodecError> {
        let map = v.as_object().ok_or_else(|| mismatch(path, "expected an object"))?;
        if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(mismatch(&format!("{path}.{k}"), "unexpected key"));
        }
        Ok(Self { path, map })
    }

    fn get(&self, k: &str) -> Result<&'a Value, CodecError> {
        self.map.get(k).ok_or_else(|| mismatch(&format!("{}.{k}", self.path), "missing key"))
    }

    fn f64(&self, k: &str) -> Result<f64, CodecError> {
        self.get(k)?.as_f64().ok_or_else(|| mismatch(&format!("{}.{k}", self.path), "expected a number"))
    }

    fn u64(&self, k: &str) -> Result<u64, CodecError> {
        self.get(k)?
            .as_u64()
            .ok_or_else(|| mismatch(&format!("{}.{k}", self.path), "expected a non-negative integer"))
    }

    fn bool(&self, k: &str) -> Result<bool, CodecError> {
        self.get(k)?.as_bool().ok_or_else(|| mismatch(&format!("{}.{k}", self.path), "expected a boolean"))
    }

    fn str(&self, k: &str) -> Result<&'a str, CodecError> {
        self.get(k)?.as_str().ok_or_else(|| mismatch(&format!("{}.{k}", self.path), "expected a string"))
    }

    fn vec3(&self, k: &str) -> Result<[f64; 3], CodecError> {
        let path = format!("{}.{k}", self.path);
        let arr = self.get(k)?.as_array().ok_or_else(|| mismatch(&path, "expected an array of 3 numbers"))?;
        if arr.len() != 3 {
            return Err(mismatch(&path, format!("expected 3 numbers, got {}", arr.len())));
        }
        let mut out = [0.0; 3];
        for (o, v) in out.iter_mut().zip(arr) {
            *o = v.as_f64().ok_or_else(|| mismatch(&path, "expected an array of 3 numbers"))?;
        }
        Ok(out)
    }
}

fn decode_msg(op: Op, topic: Option<Topic>, v: &Value) -> Result<Payload, CodecError> {
    if v.is_null() {
        return Ok(Payload::None);
    }
    let payload = match (op, topic) {
        (Op::Pong, None) => {
            let f = Fields::new("msg", v, &["epoch_unix"])?;
            Payload::Clock(ClockSync { epoch_unix: f.f64("epoch_unix")? })
        }
        (Op::Publish, Some(Topic::Servo)) => {
            let f = Fields::new("msg", v, &["position", "euler", "velocity"])?;
            Payload::Pose(PoseMessage { position: f.vec3("position")?, euler: f.vec3("euler")?, velocity: f.vec3("velocity")? })
        }
        (Op::Publish, Some(Topic::Data)) => {
            let f = Fields::new("msg", v, &["joints", "payload_attached"])?;
            Payload::Arm(ArmMessage { joints: f.vec3("joints")?, payload_attached: f.bool("payload_attached")? })
        }
        (Op::Publish, Some(Topic::Teleop)) => {
            let kind = Fields::new("msg", v, &["kind", "delta", "yaw", "position", "joints"])?.str("kind")?;
            let cmd = match kind {
                "nudge" => {
                    let f = Fields::new("msg", v, &["kind", "delta", "yaw"])?;
                    CommandMessage::Nudge { delta: f.vec3("delta")?, yaw: f.f64("yaw")? }
                }
                "setpoint" => {
                    let f = Fields::new("msg", v, &["kind", "position", "yaw"])?;
                    CommandMessage::Setpoint { position: f.vec3("position")?, yaw: f.f64("yaw")? }
                }
                "arm" => {
                    let f = Fields::new("msg", v, &["kind", "joints"])?;
                    CommandMessage::Arm { joints: f.vec3("joints")? }
                }
                "grasp" => {
                    Fields::new("msg", v, &["kind"])?;
                    CommandMessage::Grasp
                }
                "release" => {
                    Fields::new("msg", v, &["kind"])?;
                    CommandMessage::Release
                }
                other => return Err(mismatch("msg.kind", format!("unknown command kind `{other}`"))),
            };
            Payload::Command(cmd)
        }
        (Op::Publish, Some(Topic::Metrics)) => {
            let f = Fields::new(
                "msg",
                v,
                &["window", "samples", "latency_mean", "latency_p95", "injected_delay", "injected_jitter", "dropped"],
            )?;
            Payload::Metrics(MetricsMessage {
                window: f.f64("window")?,
                samples: f.u64("samples")?,
                latency_mean: f.f64("latency_mean")?,
                latency_p95: f.f64("latency_p95")?,
                injected_delay: f.f64("injected_delay")?,
                injected_jitter: f.f64("injected_jitter")?,
                dropped: f.u64("dropped")?,
            })
        }
        _ => return Err(mismatch("msg", format!("{} frames carry msg null", op.as_str()))),
    };
    Ok(payload)
}

/// Parses a frame in any key order and validates it against the registry.
pub fn decode_frame(bytes: &[u8]) -> Result<BridgeFrame, CodecError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| CodecError::Malformed {
        offset: if e.is_eof() { bytes.len() } else { byte_offset(bytes, e.line(), e.column()) },
        message: e.to_string(),
    })?;
    let f = Fields::new("frame", &value, &["op", "topic", "seq", "stamp_tx", "msg"])?;
    let op_str = f.str("op")?;
    let op: Op = op_str.parse().map_err(|_| CodecError::UnknownOp(op_str.to_string()))?;
    let topic_str = f.str("topic")?;
    let topic = if topic_str.is_empty() {
        None
    } else {
        Some(topic_str.parse::<Topic>().map_err(|_| CodecError::UnknownTopic(topic_str.to_string()))?)
    };
    let seq = f.u64("seq")?;
    let stamp_tx = f.f64("stamp_tx")?;
    let msg = decode_msg(op, topic, f.get("msg")?)?;
    let frame = BridgeFrame { op, topic, seq, stamp_tx, msg };
    frame.check_schema().map_err(|reason| mismatch("frame", reason))?;
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_layout_matches_ecmascript() {
        let cases = [
            (1.5, "1.5"),
            (0.0, "0"),
            (-0.0, "0"),
            (1.0, "1"),
            (-2.0, "-2"),
            (100.0, "100"),
            (0.1, "0.1"),
            (1e21, "1e+21"),
            (1e20, "100000000000000000000"),
            (1.5e21, "1.5e+21"),
            (1e-6, "0.000001"),
            (1e-7, "1e-7"),
            (1.25e-7, "1.25e-7"),
            (123.456, "123.456"),
            (0.1 + 0.2, "0.30000000000000004"),
            (f64::MAX, "1.7976931348623157e+308"),
            (5e-324, "5e-324"),
        ];
        for (v, s) in cases {
            assert_eq!(format_number(v).unwrap(), s, "{v:e}");
        }
        assert_eq!(format_number(f64::NAN), None);
        assert_eq!(format_number(f64::INFINITY), None);
    }

    #[test]
    fn ping_golden() {
        let bytes = encode_frame(&BridgeFrame::ping(0, 1.5)).unwrap();
        assert_eq!(bytes, br#"{"op":"ping","topic":"","seq":0,"stamp_tx":1.5,"msg":null}"#);
        assert_eq!(decode_frame(&bytes).unwrap(), BridgeFrame::ping(0, 1.5));
    }

    #[test]
    fn nan_payload_is_rejected() {
        let f = BridgeFrame::publish(
            Topic::Servo,
            1,
            0.0,
            Payload::Pose(PoseMessage { position: [0.0, f64::NAN, 0.0], ..PoseMessage::default() }),
        );
        assert_eq!(encode_frame(&f), Err(CodecError::NonFinite("position[1]".into())));
        let f = BridgeFrame::ping(0, f64::INFINITY);
        assert!(matches!(encode_frame(&f), Err(CodecError::NonFinite(_))));
    }

    #[test]
    fn encoder_enforces_topic_schema() {
        let f = BridgeFrame::publish(Topic::Data, 0, 0.0, Payload::Pose(PoseMessage::default()));
        assert!(matches!(encode_frame(&f), Err(CodecError::Invalid(_))));
    }

    #[test]
    fn accepts_any_key_order() {
        let text = br#"{"msg":null,"seq":3,"topic":"/servo","stamp_tx":2,"op":"subscribe"}"#;
        let f = decode_frame(text).unwrap();
        assert_eq!(f, BridgeFrame::control(Op::Subscribe, Topic::Servo, 3, 2.0));
        assert_eq!(
            encode_frame_str(&f).unwrap(),
            r#"{"op":"subscribe","topic":"/servo","seq":3,"stamp_tx":2,"msg":null}"#
        );
    }

    #[test]
    fn distinct_error_classes() {
        let unknown_topic = br#"{"op":"publish","topic":"/nope","seq":0,"stamp_tx":0,"msg":null}"#;
        assert_eq!(decode_frame(unknown_topic), Err(CodecError::UnknownTopic("/nope".into())));

        let unknown_op = br#"{"op":"shout","topic":"/servo","seq":0,"stamp_tx":0,"msg":null}"#;
        assert_eq!(decode_frame(unknown_op), Err(CodecError::UnknownOp("shout".into())));

        let full = br#"{"op":"ping","topic":"","seq":0,"stamp_tx":1.5,"msg":null}"#;
        match decode_frame(&full[..30]) {
            Err(CodecError::Malformed { offset, .. }) => assert_eq!(offset, 30),
            other => panic!("{other:?}"),
        }
        match decode_frame(b"{\"op\":\n  nope}") {
            Err(CodecError::Malformed { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }

        let wrong_schema = br#"{"op":"publish","topic":"/data","seq":0,"stamp_tx":0,"msg":{"joints":[1,2],"payload_attached":true}}"#;
        assert!(matches!(decode_frame(wrong_schema), Err(CodecError::SchemaMismatch { .. })));
        let extra = br#"{"op":"ping","topic":"","seq":0,"stamp_tx":0,"msg":null,"x":1}"#;
        assert!(matches!(decode_frame(extra), Err(CodecError::SchemaMismatch { .. })));
        let missing = br#"{"op":"ping","topic":"","seq":0,"msg":null}"#;
        assert!(matches!(decode_frame(missing), Err(CodecError::SchemaMismatch { .. })));
        let neg_seq = br#"{"op":"ping","topic":"","seq":-1,"stamp_tx":0,"msg":null}"#;
        assert!(matches!(decode_frame(neg_seq), Err(CodecError::SchemaMismatch { .. })));
        let ping_topic = br#"{"op":"ping","topic":"/servo","seq":0,"stamp_tx":0,"msg":null}"#;
        assert!(matches!(decode_frame(ping_topic), Err(CodecError::SchemaMismatch { .. })));
        let cmd = br#"{"op":"publish","topic":"/teleop","seq":0,"stamp_tx":0,"msg":{"kind":"fly"}}"#;
        assert!(matches!(decode_frame(cmd), Err(CodecError::SchemaMismatch { .. })));
    }

    #[test]
    fn command_frames() {
        let f = BridgeFrame::publish(
            Topic::Teleop,
            7,
            12.25,
            Payload::Command(CommandMessage::Nudge { delta: [0.5, 0.0, -0.25], yaw: 0.0 }),
        );
        let s = encode_frame_str(&f).unwrap();
        assert_eq!(
            s,
            r#"{"op":"publish","topic":"/teleop","seq":7,"stamp_tx":12.25,"msg":{"kind":"nudge","delta":[0.5,0,-0.25],"yaw":0}}"#
        );
        assert_eq!(decode_frame(s.as_bytes()).unwrap(), f);
        let g = BridgeFrame::publish(Topic::Teleop, 8, 13.0, Payload::Command(CommandMessage::Grasp));
        assert_eq!(
            encode_frame_str(&g).unwrap(),
            r#"{"op":"publish","topic":"/teleop","seq":8,"stamp_tx":13,"msg":{"kind":"grasp"}}"#
        );
    }
}
