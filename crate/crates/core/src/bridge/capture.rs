//! Capture files: one frame per line, `<rx>\t<canonical frame>`, where `rx`
//! is the session time at which the frame was observed on that side.

use super::codec::{decode_frame, encode_frame_str, format_number, CodecError};
use super::estimate::{Trace, TraceSample};
use super::frame::{BridgeFrame, Payload, Topic};
use std::io::{self, BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureLine {
    pub rx: f64,
    pub frame: BridgeFrame,
}

#[derive(Debug, thiserror::Error)]
pub enum CaptureError {
    #[error("capture line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("capture line {line}: {source}")]
    Codec { line: usize, source: CodecError },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub struct CaptureWriter<W: Write> {
    out: W,
    lines: u64,
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, lines: 0 }
    }

    pub fn write(&mut self, rx: f64, frame: &BridgeFrame) -> Result<(), CaptureError> {
        let encoded = encode_frame_str(frame).map_err(|source| CaptureError::Codec { line: self.lines as usize + 1, source })?;
        self.write_encoded(rx, &encoded)
    }

    /// Writes an already canonical frame as received from the wire.
    pub fn write_encoded(&mut self, rx: f64, encoded: &str) -> Result<(), CaptureError> {
        let stamp = format_number(rx).ok_or(CaptureError::Format {
            line: self.lines as usize + 1,
            reason: "non-finite receive time".into(),
        })?;
        writeln!(self.out, "{stamp}\t{encoded}")?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn parse_line(line: &str, number: usize) -> Result<CaptureLine, CaptureError> {
    let (rx, frame) = line.split_once('\t').ok_or(CaptureError::Format { line: number, reason: "missing tab".into() })?;
    let rx: f64 = rx
        .parse()
        .ok()
        .filter(|v: &f64| v.is_finite())
        .ok_or_else(|| CaptureError::Format { line: number, reason: format!("bad receive time {rx:?}") })?;
    let frame = decode_frame(frame.as_bytes()).map_err(|source| CaptureError::Codec { line: number, source })?;
    Ok(CaptureLine { rx, frame })
}

/// Reads a capture, skipping blank lines.
pub fn read_capture<R: BufRead>(input: R) -> Result<Vec<CaptureLine>, CaptureError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

/// `/servo` publishes as a position trace indexed by receive time.
pub fn pose_trace(lines: &[CaptureLine]) -> Trace {
    Trace::new(
        lines
            .iter()
            .filter_map(|l| match (l.frame.topic, l.frame.msg) {
                (Some(Topic::Servo), Payload::Pose(p)) => Some(TraceSample {
                    t: l.rx,
                    seq: l.frame.seq,
                    stamp_tx: l.frame.stamp_tx,
                    position: p.position,
                }),
                _ => None,
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::frame::{ArmMessage, PoseMessage};

    #[test]
    fn round_trip() {
        let frames = [
            BridgeFrame::publish(
                Topic::Servo,
                0,
                0.02,
                Payload::Pose(PoseMessage { position: [0.1, -0.2, -2.0], euler: [0.0, 0.01, 1.5], velocity: [0.0; 3] }),
            ),
            BridgeFrame::publish(Topic::Data, 0, 0.02, Payload::Arm(ArmMessage { joints: [0.0, 0.8, 0.6], payload_attached: true })),
            BridgeFrame::ping(3, 1.0 / 3.0),
        ];
        let mut w = CaptureWriter::new(Vec::new());
        for (i, f) in frames.iter().enumerate() {
            w.write(0.52 + i as f64 * 0.1, f).unwrap();
        }
        assert_eq!(w.lines(), 3);
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert!(text.starts_with("0.52\t{\"op\":\"publish\",\"topic\":\"/servo\","));
        let back = read_capture(text.as_bytes()).unwrap();
        assert_eq!(back.iter().map(|l| l.frame).collect::<Vec<_>>(), frames);
        let trace = pose_trace(&back);
        assert_eq!(trace.samples.len(), 1);
        assert_eq!(trace.samples[0].t, 0.52);
        assert_eq!(trace.samples[0].stamp_tx, 0.02);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let err = read_capture("0.1\t{\"op\":\"ping\",\"topic\":\"\",\"seq\":0,\"stamp_tx\":0,\"msg\":null}\nnope\n".as_bytes())
            .unwrap_err();
        assert!(matches!(err, CaptureError::Format { line: 2, .. }), "{err}");
        let err = read_capture("0.1\t{\"op\":\"bogus\"}".as_bytes()).unwrap_err();
        assert!(matches!(err, CaptureError::Codec { line: 1, .. }), "{err}");
    }
}
