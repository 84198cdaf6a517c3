//! Avatar client: connects to a bridge, mirrors `/servo` and `/data` into a
//! twin and records what it received.

use crate::failure::Failure;
use futures_util::{SinkExt, StreamExt};
use std::fs::File;
use std::future::Future;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};
use tokio_tungstenite::tungstenite::Message;
use tracing::{debug, info, warn};
use twinlift_core::avatar::{ApplyOutcome, RenderState, SharedTwin, TwinCounters};
use twinlift_core::bridge::capture::CaptureWriter;
use twinlift_core::bridge::{decode_frame, encode_frame_str, BridgeFrame, Op, Payload, Topic};

#[derive(Debug, Clone)]
pub struct AvatarOptions {
    /// `ws://host:port`
    pub url: String,
    pub capture: Option<PathBuf>,
    /// Stop after this many seconds; `None` runs until the server closes or
    /// the stop future resolves.
    pub duration: Option<f64>,
    pub connect_timeout: Duration,
}

#[derive(Debug, Clone)]
pub struct AvatarReport {
    pub counters: TwinCounters,
    pub capture: Option<PathBuf>,
    pub captured: u64,
    /// Server session time minus local clock, from the connect handshake.
    pub clock_offset: Option<f64>,
    pub last_state: Option<RenderState>,
}

pub async fn run_avatar(opts: AvatarOptions, stop: impl Future<Output = ()>) -> Result<AvatarReport, Failure> {
    let deadline = Instant::now() + opts.connect_timeout;
    let ws = loop {
        match tokio_tungstenite::connect_async(opts.url.as_str()).await {
            Ok((ws, _)) => break ws,
            Err(e) if Instant::now() >= deadline => {
                return Err(Failure::runtime(format!("cannot connect to {}: {e}", opts.url)));
            }
            Err(_) => tokio::time::sleep(Duration::from_millis(100)).await,
        }
    };
    let (mut sink, mut source) = ws.split();
    for (seq, topic) in [Topic::Servo, Topic::Data].into_iter().enumerate() {
        let frame = BridgeFrame::control(Op::Subscribe, topic, seq as u64, 0.0);
        sink.send(Message::text(encode_frame_str(&frame).expect("subscribe encodes")))
            .await
            .map_err(|e| Failure::runtime(format!("subscribe failed: {e}")))?;
    }
    info!(url = %opts.url, "avatar connected");

    let mut capture = match &opts.capture {
        Some(p) => Some(CaptureWriter::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", p.display())))?,
        ))),
        None => None,
    };
    let twin = Arc::new(SharedTwin::new());
    let local = Instant::now();
    let mut offset: Option<f64> = None;
    let session_now = |offset: Option<f64>| local.elapsed().as_secs_f64() + offset.unwrap_or(0.0);
    let run_for = opts.duration.map(Duration::from_secs_f64).unwrap_or(Duration::MAX / 4);
    let end = tokio::time::sleep(run_for);
    tokio::pin!(end, stop);
    let mut report_tick = tokio::time::interval(Duration::from_secs(1));

    loop {
        tokio::select! {
            msg = source.next() => {
                let text = match msg {
                    Some(Ok(Message::Text(text))) => text,
                    Some(Ok(Message::Close(_))) | None => break,
                    Some(Err(e)) => {
                        warn!("avatar connection error: {e}");
                        break;
                    }
                    Some(Ok(_)) => continue,
                };
                let rx = session_now(offset);
                let frame = match decode_frame(text.as_bytes()) {
                    Ok(f) => f,
                    Err(e) => {
                        warn!("avatar rejected a frame: {e}");
                        let _ = twin.apply_bytes(rx, text.as_bytes());
                        continue;
                    }
                };
                match (frame.op, frame.msg) {
                    (Op::Pong, Payload::Clock(_)) => {
                        let o = frame.stamp_tx - local.elapsed().as_secs_f64();
                        debug!(offset = o, "clock handshake");
                        offset = Some(o);
                    }
                    (Op::Publish, Payload::Pose(_) | Payload::Arm(_)) => {
                        if twin.apply_telemetry(rx, &frame) == ApplyOutcome::Applied {
                            if let Some(w) = capture.as_mut() {
                                w.write_encoded(rx, &text).map_err(|e| Failure::runtime(format!("avatar capture: {e}")))?;
                            }
                        }
                    }
                    _ => {}
                }
            }
            _ = report_tick.tick() => {
                if let Ok(s) = twin.render_state(session_now(offset)) {
                    debug!(position = ?s.position, stale = s.stale, "avatar");
                }
            }
            _ = &mut end => break,
            _ = &mut stop => break,
        }
    }
    let _ = sink.send(Message::Close(None)).await;
    let captured = match capture.as_mut() {
        Some(w) => {
            w.flush().map_err(|e| Failure::runtime(format!("cannot flush avatar capture: {e}")))?;
            w.lines()
        }
        None => 0,
    };
    let snapshot = twin.snapshot();
    Ok(AvatarReport {
        counters: snapshot.counters(),
        capture: opts.capture.clone(),
        captured,
        clock_offset: offset,
        last_state: snapshot.render_state(session_now(offset)).ok(),
    })
}
