//! `serve`: simulator, bridge server and optional in-process avatar.
//!
//! Activities and the queues between them:
//!
//! - sim thread → [`SnapshotQueue`] (bounded, drop-oldest) → publisher task
//! - publisher task → delay line → broker task (the single registry owner)
//! - broker task → per-client unbounded outboxes → socket writer
//! - `/teleop` deliveries to the robot client → sim thread command channel

use crate::avatar_client::{run_avatar, AvatarOptions, AvatarReport};
use crate::commands::{ensure_dir, read_capture_file, write_file};
use crate::failure::Failure;
use futures_util::{SinkExt, StreamExt};
use serde_json::json;
use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc as std_mpsc, Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch, Notify};
use tokio_tungstenite::tungstenite::Message;
use tracing::{debug, info, warn};
use twinlift_core::avatar::{fidelity_report, paired_trace_csv, FidelityReport};
use twinlift_core::bridge::capture::CaptureWriter;
use twinlift_core::bridge::{
    decode_frame, encode_frame_str, ArmMessage, BridgeFrame, Broker, ClientId, ClockSync, DelayLine,
    DelaySpec, EstimatorConfig, LatencyStats, MetricsMessage, Op, Payload, PoseMessage, Topic,
};
use twinlift_core::scenario::ScenarioFile;
use twinlift_core::se3::euler_from_rotation;
use twinlift_core::sim::{Event, SimError, Simulation};

pub const ROBOT_CAPTURE: &str = "robot.capture";
pub const AVATAR_CAPTURE: &str = "avatar.capture";

/// Monotonic session clock shared by every activity of one process.
#[derive(Debug, Clone, Copy)]
pub struct SessionClock {
    origin: Instant,
    pub epoch_unix: f64,
}

impl SessionClock {
    pub fn start() -> Self {
        let epoch_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        Self { origin: Instant::now(), epoch_unix }
    }

    pub fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    pub fn instant_at(&self, t: f64) -> Instant {
        self.origin + Duration::from_secs_f64(t.max(0.0))
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub scenario: ScenarioFile,
    pub out: PathBuf,
    /// Session length in seconds; `None` runs until the shutdown signal.
    pub duration: Option<f64>,
    /// Run an avatar client in this process.
    pub avatar: bool,
}

#[derive(Debug, Clone)]
pub struct ServeReport {
    pub addr: SocketAddr,
    pub sim_time: f64,
    pub snapshots: u64,
    pub published: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub commands: u64,
    pub robot_capture: Option<PathBuf>,
    pub avatar: Option<AvatarReport>,
    pub fidelity: Option<FidelityReport>,
    pub summary_path: PathBuf,
}

#[derive(Debug, Clone, Copy)]
struct Snapshot {
    pose: PoseMessage,
    arm: ArmMessage,
}

/// Bounded queue that drops the oldest entry when full.
#[derive(Debug)]
struct SnapshotQueue {
    inner: Mutex<QueueInner>,
    notify: Notify,
    capacity: usize,
}

#[derive(Debug, Default)]
struct QueueInner {
    items: VecDeque<Snapshot>,
    closed: bool,
    dropped: u64,
}

impl SnapshotQueue {
    fn new(capacity: usize) -> Self {
        Self { inner: Mutex::default(), notify: Notify::new(), capacity }
    }

    fn push(&self, s: Snapshot) {
        {
            let mut q = self.inner.lock().unwrap();
            if q.items.len() >= self.capacity {
                q.items.pop_front();
                q.dropped += 1;
            }
            q.items.push_back(s);
        }
        self.notify.notify_one();
    }

    fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.notify.notify_one();
    }

    fn dropped(&self) -> u64 {
        self.inner.lock().unwrap().dropped
    }

    /// Everything queued, or `None` once closed and empty.
    async fn pop_batch(&self) -> Option<Vec<Snapshot>> {
        loop {
            {
                let mut q = self.inner.lock().unwrap();
                if !q.items.is_empty() {
                    return Some(q.items.drain(..).collect());
                }
                if q.closed {
                    return None;
                }
            }
            self.notify.notified().await;
        }
    }
}

#[derive(Debug, Default)]
struct BridgeStats {
    published: AtomicU64,
    /// Robot publishes that reached no subscriber.
    unrouted: AtomicU64,
    commands: AtomicU64,
    latencies: Mutex<Vec<f64>>,
}

type Outbox = mpsc::UnboundedSender<Arc<str>>;

enum BrokerCmd {
    Connect { outbox: Outbox, reply: oneshot::Sender<ClientId> },
    Frame { from: ClientId, frame: BridgeFrame },
    Leave(ClientId),
    /// Answered once every earlier command has been processed.
    Barrier(oneshot::Sender<u64>),
}

#[derive(Clone)]
struct BrokerHandle(mpsc::UnboundedSender<BrokerCmd>);

impl BrokerHandle {
    async fn connect(&self, outbox: Outbox) -> Option<ClientId> {
        let (reply, rx) = oneshot::channel();
        self.0.send(BrokerCmd::Connect { outbox, reply }).ok()?;
        rx.await.ok()
    }

    fn send(&self, from: ClientId, frame: BridgeFrame) {
        let _ = self.0.send(BrokerCmd::Frame { from, frame });
    }

    fn leave(&self, id: ClientId) {
        let _ = self.0.send(BrokerCmd::Leave(id));
    }

    async fn barrier(&self) -> u64 {
        let (tx, rx) = oneshot::channel();
        if self.0.send(BrokerCmd::Barrier(tx)).is_err() {
            return 0;
        }
        rx.await.unwrap_or(0)
    }
}

async fn broker_task(mut rx: mpsc::UnboundedReceiver<BrokerCmd>, clock: SessionClock, robot: Arc<Mutex<Option<ClientId>>>, stats: Arc<BridgeStats>) {
    let mut broker = Broker::new();
    let mut outboxes: HashMap<ClientId, Outbox> = HashMap::new();
    while let Some(cmd) = rx.recv().await {
        match cmd {
            BrokerCmd::Connect { outbox, reply } => {
                let id = broker.connect();
                let hello = BridgeFrame {
                    op: Op::Pong,
                    topic: None,
                    seq: 0,
                    stamp_tx: clock.now(),
                    msg: Payload::Clock(ClockSync { epoch_unix: clock.epoch_unix }),
                };
                let _ = outbox.send(encode_frame_str(&hello).expect("clock frame encodes").into());
                outboxes.insert(id, outbox);
                let _ = reply.send(id);
            }
            BrokerCmd::Frame { from, frame } => match broker.dispatch(from, &frame) {
                Ok(delivery) => {
                    if let (Some(reply), Some(out)) = (delivery.reply, outboxes.get(&from)) {
                        if let Ok(text) = encode_frame_str(&reply) {
                            let _ = out.send(text.into());
                        }
                    }
                    if frame.op == Op::Publish && delivery.recipients.is_empty() && Some(from) == *robot.lock().unwrap() {
                        stats.unrouted.fetch_add(1, Ordering::Relaxed);
                    }
                    let dead = broker.deliver(&delivery, |id, bytes| outboxes.get(&id).is_some_and(|o| o.send(bytes.clone()).is_ok()));
                    for id in dead {
                        debug!(client = id, "dropping dead client");
                        outboxes.remove(&id);
                    }
                }
                Err(e) => warn!(client = from, "rejected frame: {e}"),
            },
            BrokerCmd::Leave(id) => {
                broker.remove_client(id);
                outboxes.remove(&id);
            }
            BrokerCmd::Barrier(reply) => {
                let _ = reply.send(broker.delivered_count());
            }
        }
    }
}

struct SimRun {
    sim_time: f64,
    snapshots: u64,
}

#[allow(clippy::too_many_arguments)]
fn run_sim(
    scenario: &ScenarioFile,
    duration: Option<f64>,
    clock: SessionClock,
    queue: &SnapshotQueue,
    commands: std_mpsc::Receiver<Event>,
    stop: &AtomicBool,
) -> Result<SimRun, SimError> {
    let config = &scenario.sim;
    let mut sim = Simulation::new(config)?;
    let dt = config.dt;
    let steps_per_publish = ((1.0 / (scenario.bridge.publish_rate * dt)).round() as u64).max(1);
    let last_step = duration.map(|d| (d / dt).round() as u64);
    let mut events = config.events.iter().peekable();
    let start = clock.now();
    let mut snapshots = 0;
    let mut i = 0u64;
    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let t = sim.time();
        while let Some(e) = events.next_if(|e| e.t <= t + 0.5 * dt) {
            sim.apply_event(&e.event);
        }
        while let Ok(e) = commands.try_recv() {
            debug!(t, ?e, "operator command");
            sim.apply_event(&e);
        }
        if i % steps_per_publish == 0 {
            if scenario.bridge.realtime {
                let target = clock.instant_at(start + t);
                let now = Instant::now();
                if target > now {
                    std::thread::sleep(target - now);
                }
            }
            let s = sim.state();
            queue.push(Snapshot {
                pose: PoseMessage {
                    position: s.position.into(),
                    euler: euler_from_rotation(&s.attitude).angles.to_array(),
                    velocity: s.velocity.into(),
                },
                arm: ArmMessage { joints: s.arm_angles, payload_attached: s.payload_attached },
            });
            snapshots += 1;
        }
        if last_step == Some(i) {
            break;
        }
        sim.step()?;
        i += 1;
    }
    Ok(SimRun { sim_time: sim.time(), snapshots })
}

struct PublisherOutcome {
    capture: Option<CaptureWriter<BufWriter<File>>>,
}

/// Stamps snapshots, records them in the robot capture, and hands them to
/// the broker after the injected delay. Returns once the queue is closed
/// and the delay line has drained.
async fn publisher_task(
    queue: Arc<SnapshotQueue>,
    spec: DelaySpec,
    clock: SessionClock,
    broker: BrokerHandle,
    robot: ClientId,
    mut capture: Option<CaptureWriter<BufWriter<File>>>,
    stats: Arc<BridgeStats>,
) -> PublisherOutcome {
    let mut line: DelayLine<BridgeFrame> = DelayLine::new(spec);
    let mut seq = 0u64;
    let mut queue_open = true;
    loop {
        if !queue_open && line.is_empty() {
            break;
        }
        let next = line.next_release();
        tokio::select! {
            batch = queue.pop_batch(), if queue_open => match batch {
                Some(batch) => {
                    for s in batch {
                        let now = clock.now();
                        for frame in [
                            BridgeFrame::publish(Topic::Servo, seq, now, Payload::Pose(s.pose)),
                            BridgeFrame::publish(Topic::Data, seq, now, Payload::Arm(s.arm)),
                        ] {
                            if let Some(w) = capture.as_mut() {
                                if let Err(e) = w.write(now, &frame) {
                                    warn!("robot capture disabled: {e}");
                                    capture = None;
                                }
                            }
                            line.push(now, frame);
                        }
                        seq += 1;
                    }
                }
                None => queue_open = false,
            },
            _ = tokio::time::sleep_until(clock.instant_at(next.unwrap_or(0.0)).into()), if next.is_some() => {
                let now = clock.now();
                let ready = line.pop_ready(now);
                let mut lat = stats.latencies.lock().unwrap();
                for (_, frame) in ready {
                    if frame.topic == Some(Topic::Servo) {
                        lat.push(now - frame.stamp_tx);
                    }
                    stats.published.fetch_add(1, Ordering::Relaxed);
                    broker.send(robot, frame);
                }
            }
        }
    }
    PublisherOutcome { capture }
}

async fn metrics_task(
    broker: BrokerHandle,
    id: ClientId,
    clock: SessionClock,
    interval: f64,
    spec: DelaySpec,
    capture: bool,
    queue: Arc<SnapshotQueue>,
    stats: Arc<BridgeStats>,
) {
    let mut tick = tokio::time::interval(Duration::from_secs_f64(interval));
    tick.tick().await;
    let mut seq = 0;
    loop {
        tick.tick().await;
        let window: Vec<f64> = std::mem::take(&mut *stats.latencies.lock().unwrap());
        let st = LatencyStats::from_values(&window);
        let unrouted = if capture { 0 } else { stats.unrouted.load(Ordering::Relaxed) };
        let msg = MetricsMessage {
            window: interval,
            samples: window.len() as u64,
            latency_mean: st.map_or(0.0, |s| s.mean),
            latency_p95: st.map_or(0.0, |s| s.p95),
            injected_delay: spec.delay,
            injected_jitter: spec.jitter,
            dropped: queue.dropped() + unrouted,
        };
        debug!(?msg, "metrics");
        broker.send(id, BridgeFrame::publish(Topic::Metrics, seq, clock.now(), Payload::Metrics(msg)));
        seq += 1;
    }
}

/// Forwards `/teleop` deliveries addressed to the robot into the simulation.
async fn teleop_task(mut inbox: mpsc::UnboundedReceiver<Arc<str>>, commands: std_mpsc::Sender<Event>, stats: Arc<BridgeStats>) {
    while let Some(text) = inbox.recv().await {
        match decode_frame(text.as_bytes()) {
            Ok(BridgeFrame { op: Op::Publish, msg: Payload::Command(cmd), .. }) => {
                stats.commands.fetch_add(1, Ordering::Relaxed);
                if commands.send(Event::from(cmd)).is_err() {
                    break;
                }
            }
            Ok(_) => {}
            Err(e) => warn!("robot received an undecodable frame: {e}"),
        }
    }
}

async fn connection_task(stream: TcpStream, peer: SocketAddr, broker: BrokerHandle, mut stop: watch::Receiver<bool>) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            warn!(%peer, "websocket handshake failed: {e}");
            return;
        }
    };
    let (mut sink, mut source) = ws.split();
    let (tx, mut outbox) = mpsc::unbounded_channel();
    let Some(id) = broker.connect(tx).await else {
        return;
    };
    info!(%peer, client = id, "client connected");
    loop {
        tokio::select! {
            out = outbox.recv() => match out {
                Some(text) => {
                    if sink.send(Message::text(text.to_string())).await.is_err() {
                        break;
                    }
                }
                None => break,
            },
            msg = source.next() => match msg {
                Some(Ok(Message::Text(text))) => match decode_frame(text.as_bytes()) {
                    Ok(frame) => broker.send(id, frame),
                    Err(e) => warn!(client = id, "undecodable frame: {e}"),
                },
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
            _ = stop.changed() => {
                while let Ok(text) = outbox.try_recv() {
                    if sink.send(Message::text(text.to_string())).await.is_err() {
                        break;
                    }
                }
                let _ = sink.send(Message::Close(None)).await;
                break;
            }
        }
    }
    broker.leave(id);
    info!(client = id, "client disconnected");
}

fn create_capture(path: &PathBuf) -> Result<CaptureWriter<BufWriter<File>>, Failure> {
    let f = File::create(path).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", path.display())))?;
    Ok(CaptureWriter::new(BufWriter::new(f)))
}

/// Bound but not yet running server. Binding first reports a busy port
/// before any simulation starts.
pub struct BoundServer {
    listener: TcpListener,
    options: ServeOptions,
}

pub async fn bind(options: ServeOptions) -> Result<BoundServer, Failure> {
    options.scenario.validate().map_err(Failure::config)?;
    let b = &options.scenario.bridge;
    let addr = format!("{}:{}", b.host, b.port);
    let listener = TcpListener::bind(&addr).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            Failure::runtime(format!("port {} is already in use on {}", b.port, b.host))
        } else {
            Failure::runtime(format!("cannot listen on {addr}: {e}"))
        }
    })?;
    Ok(BoundServer { listener, options })
}

impl BoundServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub async fn run(self, shutdown: impl std::future::Future<Output = ()>) -> Result<ServeReport, Failure> {
        let addr = self.local_addr();
        let BoundServer { listener, options } = self;
        let scenario = options.scenario.clone();
        let bridge = scenario.bridge.clone();
        ensure_dir(&options.out)?;
        let clock = SessionClock::start();
        let stats = Arc::new(BridgeStats::default());
        let spec = DelaySpec { delay: bridge.delay, jitter: bridge.jitter, seed: bridge.seed };

        let robot_slot = Arc::new(Mutex::new(None));
        let (broker_tx, broker_rx) = mpsc::unbounded_channel();
        let broker = BrokerHandle(broker_tx);
        let broker_join = tokio::spawn(broker_task(broker_rx, clock, robot_slot.clone(), stats.clone()));

        let (robot_tx, robot_inbox) = mpsc::unbounded_channel();
        let robot = broker.connect(robot_tx).await.ok_or_else(|| Failure::runtime("broker stopped"))?;
        *robot_slot.lock().unwrap() = Some(robot);
        broker.send(robot, BridgeFrame::control(Op::Advertise, Topic::Servo, 0, 0.0));
        broker.send(robot, BridgeFrame::control(Op::Advertise, Topic::Data, 1, 0.0));
        broker.send(robot, BridgeFrame::control(Op::Subscribe, Topic::Teleop, 2, 0.0));
        let (cmd_tx, cmd_rx) = std_mpsc::channel();
        let teleop = tokio::spawn(teleop_task(robot_inbox, cmd_tx, stats.clone()));

        let (metrics_out, _) = mpsc::unbounded_channel();
        let metrics_id = broker.connect(metrics_out).await.ok_or_else(|| Failure::runtime("broker stopped"))?;
        broker.send(metrics_id, BridgeFrame::control(Op::Advertise, Topic::Metrics, 0, 0.0));

        let (stop_tx, stop_rx) = watch::channel(false);
        let accept = {
            let broker = broker.clone();
            let mut stop = stop_rx.clone();
            tokio::spawn(async move {
                let mut conns = Vec::new();
                loop {
                    tokio::select! {
                        res = listener.accept() => match res {
                            Ok((stream, peer)) => {
                                let _ = stream.set_nodelay(true);
                                conns.push(tokio::spawn(connection_task(stream, peer, broker.clone(), stop.clone())));
                            }
                            Err(e) => warn!("accept failed: {e}"),
                        },
                        _ = stop.changed() => break,
                    }
                }
                for c in conns {
                    let _ = c.await;
                }
            })
        };
        info!(%addr, delay = bridge.delay, jitter = bridge.jitter, "bridge listening");

        let robot_capture_path = options.out.join(ROBOT_CAPTURE);
        let avatar_capture_path = options.out.join(AVATAR_CAPTURE);
        let robot_capture = if bridge.capture { Some(create_capture(&robot_capture_path)?) } else { None };

        let queue = Arc::new(SnapshotQueue::new(bridge.queue_capacity));
        let publisher =
            tokio::spawn(publisher_task(queue.clone(), spec, clock, broker.clone(), robot, robot_capture, stats.clone()));
        let metrics = tokio::spawn(metrics_task(
            broker.clone(),
            metrics_id,
            clock,
            bridge.metrics_interval,
            spec,
            bridge.capture,
            queue.clone(),
            stats.clone(),
        ));

        let (avatar_stop_tx, mut avatar_stop_rx) = watch::channel(false);
        let avatar = options.avatar.then(|| {
            let opts = AvatarOptions {
                url: format!("ws://{addr}"),
                capture: bridge.capture.then(|| avatar_capture_path.clone()),
                duration: None,
                connect_timeout: Duration::from_secs(5),
            };
            tokio::spawn(async move {
                run_avatar(opts, async move {
                    let _ = avatar_stop_rx.wait_for(|v| *v).await;
                })
                .await
            })
        });

        let stop_flag = Arc::new(AtomicBool::new(false));
        let mut sim = {
            let queue = queue.clone();
            let stop_flag = stop_flag.clone();
            let duration = options.duration;
            tokio::task::spawn_blocking(move || run_sim(&scenario, duration, clock, &queue, cmd_rx, &stop_flag))
        };
        let sim_result = tokio::select! {
            r = &mut sim => r,
            _ = shutdown => {
                info!("shutdown requested");
                stop_flag.store(true, Ordering::Relaxed);
                sim.await
            }
        };
        let sim_run = sim_result.map_err(|e| Failure::runtime(format!("simulation thread failed: {e}")));

        // drain: queue → delay line → broker → sockets → avatar
        queue.close();
        let outcome = publisher.await.map_err(|e| Failure::runtime(format!("publisher failed: {e}")))?;
        let delivered = broker.barrier().await;
        metrics.abort();
        let _ = stop_tx.send(true);
        let _ = accept.await;
        let avatar_report = match avatar {
            Some(mut handle) => {
                // the server's close frame ends the avatar after the last delivery
                let joined = match tokio::time::timeout(Duration::from_secs(2), &mut handle).await {
                    Ok(r) => Ok(r),
                    Err(_) => {
                        let _ = avatar_stop_tx.send(true);
                        tokio::time::timeout(Duration::from_secs(5), handle).await
                    }
                };
                match joined {
                    Ok(Ok(Ok(r))) => Some(r),
                    Ok(Ok(Err(e))) => return Err(e),
                    Ok(Err(e)) => return Err(Failure::runtime(format!("avatar task failed: {e}"))),
                    Err(_) => return Err(Failure::runtime("avatar did not stop")),
                }
            }
            None => None,
        };
        teleop.abort();
        drop(broker);
        broker_join.abort();

        let robot_capture = match outcome.capture {
            Some(mut w) => {
                w.flush().map_err(|e| Failure::runtime(format!("cannot flush robot capture: {e}")))?;
                Some(robot_capture_path)
            }
            None => None,
        };
        let sim_run = sim_run?.map_err(Failure::runtime)?;

        let fidelity = match (&robot_capture, avatar_report.as_ref().and_then(|a| a.capture.clone())) {
            (Some(r), Some(a)) => {
                let robot_lines = read_capture_file(r)?;
                let avatar_lines = read_capture_file(&a)?;
                match fidelity_report(&robot_lines, &avatar_lines, &EstimatorConfig::default()) {
                    Ok(rep) => {
                        write_file(&options.out.join("paired.csv"), &paired_trace_csv(&robot_lines, &avatar_lines))?;
                        write_file(&options.out.join("fidelity.json"), &(rep.to_json().map_err(Failure::runtime)? + "\n"))?;
                        Some(rep)
                    }
                    Err(e) => {
                        warn!("no fidelity report: {e}");
                        None
                    }
                }
            }
            _ => None,
        };

        let dropped = queue.dropped() + if bridge.capture { 0 } else { stats.unrouted.load(Ordering::Relaxed) };
        let report = ServeReport {
            addr,
            sim_time: sim_run.sim_time,
            snapshots: sim_run.snapshots,
            published: stats.published.load(Ordering::Relaxed),
            delivered,
            dropped,
            commands: stats.commands.load(Ordering::Relaxed),
            robot_capture,
            avatar: avatar_report,
            fidelity,
            summary_path: options.out.join("serve_summary.json"),
        };
        let summary = json!({
            "address": addr.to_string(),
            "sim_time": report.sim_time,
            "snapshots": report.snapshots,
            "published": report.published,
            "delivered": report.delivered,
            "dropped": report.dropped,
            "commands": report.commands,
            "injected_delay": bridge.delay,
            "injected_jitter": bridge.jitter,
            "clock": "single-host",
            "robot_capture": report.robot_capture.as_ref().map(|p| p.display().to_string()),
            "avatar_capture": report.avatar.as_ref().and_then(|a| a.capture.as_ref()).map(|p| p.display().to_string()),
        });
        write_file(&report.summary_path, &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))?;
        Ok(report)
    }
}
