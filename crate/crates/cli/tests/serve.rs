use futures_util::{SinkExt, StreamExt};
use std::path::Path;
use std::time::Duration;
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;
use twinlift::serve::{self, ServeOptions, ServeReport, AVATAR_CAPTURE, ROBOT_CAPTURE};
use twinlift::FailureKind;
use twinlift_core::bridge::capture::{read_capture, CaptureLine};
use twinlift_core::bridge::*;
use twinlift_core::scenario::ScenarioFile;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

fn scenario() -> ScenarioFile {
    let mut s = ScenarioFile::default();
    s.bridge.port = 0;
    s
}

async fn send(ws: &mut Ws, f: BridgeFrame) {
    ws.send(Message::text(encode_frame_str(&f).unwrap())).await.unwrap();
}

async fn recv(ws: &mut Ws) -> BridgeFrame {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.expect("frame within 5 s");
        if let Some(Ok(Message::Text(t))) = msg {
            return decode_frame(t.as_bytes()).unwrap();
        }
        assert!(!matches!(msg, None | Some(Err(_))), "connection ended");
    }
}

/// Runs a server until `body` returns, then shuts it down.
async fn with_server<F, Fut>(s: ScenarioFile, out: &Path, body: F) -> ServeReport
where
    F: FnOnce(String) -> Fut,
    Fut: std::future::Future<Output = ()>,
{
    let server = serve::bind(ServeOptions { scenario: s, out: out.to_path_buf(), duration: None, avatar: false })
        .await
        .unwrap();
    let url = format!("ws://{}", server.local_addr());
    let (tx, rx) = oneshot::channel::<()>();
    let handle = tokio::spawn(server.run(async move {
        let _ = rx.await;
    }));
    body(url).await;
    tx.send(()).unwrap();
    handle.await.unwrap().unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn connect_announces_clock_and_ping_echoes() {
    let dir = tempfile::tempdir().unwrap();
    with_server(scenario(), dir.path(), |url| async move {
        let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        let hello = recv(&mut ws).await;
        assert_eq!(hello.op, Op::Pong);
        let Payload::Clock(c) = hello.msg else { panic!("expected clock sync, got {hello:?}") };
        assert!(c.epoch_unix > 1.0e9);
        send(&mut ws, BridgeFrame::ping(77, 12.5)).await;
        let pong = recv(&mut ws).await;
        assert_eq!(pong, BridgeFrame { op: Op::Pong, ..BridgeFrame::ping(77, 12.5) });
    })
    .await;
}

#[tokio::test(flavor = "multi_thread")]
async fn teleop_nudge_moves_the_vehicle() {
    let dir = tempfile::tempdir().unwrap();
    let report = with_server(scenario(), dir.path(), |url| async move {
        let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        send(&mut ws, BridgeFrame::control(Op::Subscribe, Topic::Servo, 0, 0.0)).await;
        let pose = |f: &BridgeFrame| match f.msg {
            Payload::Pose(p) => Some(p),
            _ => None,
        };
        let start = loop {
            if let Some(p) = pose(&recv(&mut ws).await) {
                break p;
            }
        };
        assert!(start.position[0].abs() < 0.05, "{start:?}");
        let nudge = CommandMessage::Nudge { delta: [1.0, 0.0, 0.0], yaw: 0.0 };
        send(&mut ws, BridgeFrame::publish(Topic::Teleop, 1, 0.0, Payload::Command(nudge))).await;
        let deadline = tokio::time::Instant::now() + Duration::from_secs(6);
        let mut x = start.position[0];
        while tokio::time::Instant::now() < deadline && x < 0.95 {
            if let Some(p) = pose(&recv(&mut ws).await) {
                x = p.position[0];
            }
        }
        assert!(x >= 0.95, "x only reached {x}");
    })
    .await;
    assert_eq!(report.commands, 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn unobserved_telemetry_counts_as_dropped_without_capture() {
    let dir = tempfile::tempdir().unwrap();
    let idle = || tokio::time::sleep(Duration::from_millis(500));

    let mut s = scenario();
    s.bridge.capture = false;
    let report = with_server(s, dir.path(), |_| idle()).await;
    assert!(report.published > 0);
    assert!(report.dropped > 0, "{report:?}");

    let report = with_server(scenario(), dir.path(), |_| idle()).await;
    assert!(report.published > 0);
    assert_eq!(report.dropped, 0, "{report:?}");
}

#[tokio::test(flavor = "multi_thread")]
async fn shutdown_leaves_parseable_captures() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve::bind(ServeOptions { scenario: scenario(), out: dir.path().to_path_buf(), duration: Some(1.5), avatar: true })
        .await
        .unwrap();
    let report = server.run(std::future::pending()).await.unwrap();
    let robot = std::fs::File::open(dir.path().join(ROBOT_CAPTURE)).unwrap();
    let robot = read_capture(std::io::BufReader::new(robot)).unwrap();
    let avatar = std::fs::File::open(dir.path().join(AVATAR_CAPTURE)).unwrap();
    let avatar = read_capture(std::io::BufReader::new(avatar)).unwrap();
    assert!(robot.len() >= 100, "{} robot lines", robot.len());
    // Frames published before the avatar subscribed are lost; everything
    // after that reaches it, including the last one before shutdown.
    for topic in [Topic::Servo, Topic::Data] {
        let seqs = |lines: &[CaptureLine]| -> Vec<u64> {
            lines.iter().filter(|l| l.frame.topic == Some(topic)).map(|l| l.frame.seq).collect()
        };
        let got = seqs(&avatar);
        let expected: Vec<u64> = seqs(&robot).into_iter().filter(|s| *s >= got[0]).collect();
        assert_eq!(got, expected, "{topic}");
    }
    assert!(robot.len() - avatar.len() < 20);
    assert!(robot.windows(2).all(|w| w[0].rx <= w[1].rx));
    let counters = report.avatar.unwrap().counters;
    assert_eq!(counters.applied as usize, avatar.len());
    assert!(dir.path().join("serve_summary.json").exists());
}

#[tokio::test(flavor = "multi_thread")]
async fn busy_port_is_a_runtime_failure() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let mut s = scenario();
    s.bridge.port = taken.local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let err = serve::bind(ServeOptions { scenario: s, out: dir.path().to_path_buf(), duration: Some(1.0), avatar: false })
        .await
        .err()
        .expect("bind must fail");
    assert_eq!(err.kind, FailureKind::Runtime);
    assert!(err.message.contains("already in use"), "{}", err.message);
}
