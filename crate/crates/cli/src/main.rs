use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;
use tracing_subscriber::EnvFilter;
use twinlift::avatar_client::{run_avatar, AvatarOptions};
use twinlift::commands::{self, describe_report, describe_summary, load_scenario, write_file};
use twinlift::serve::{self, ServeOptions, AVATAR_CAPTURE};
use twinlift::Failure;
use twinlift_core::scenario::{ScenarioFile, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "twinlift", version, about = "Aerial manipulator digital twin: simulate, serve, mirror, report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario headless and write the CSV log and summary.
    Simulate {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the built-in pick-and-place scenario.
    PickAndPlace {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write the preset as an editable scenario file.
        #[arg(long)]
        write_scenario: Option<PathBuf>,
    },
    /// Run simulator and bridge server in real time.
    Serve {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Injected one-way delay on /servo and /data, s.
        #[arg(long)]
        delay: Option<f64>,
        /// Half-width of the uniform delay jitter, s.
        #[arg(long)]
        jitter: Option<f64>,
        /// Seed for the simulation disturbance and the jitter.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        realtime: Option<Switch>,
        #[arg(long, value_enum)]
        capture: Option<Switch>,
        /// Run an avatar client in this process.
        #[arg(long, value_enum, default_value = "off")]
        avatar: Switch,
        /// Session length, s; 0 runs until interrupted. Defaults to the
        /// scenario duration.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Start from the pick-and-place preset instead of a scenario file.
        #[arg(long, conflicts_with = "scenario")]
        pick_and_place: bool,
    },
    /// Connect to a bridge as an avatar and capture the mirrored telemetry.
    Avatar {
        #[arg(long, default_value_t = format!("ws://127.0.0.1:{DEFAULT_PORT}"))]
        url: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "on")]
        capture: Switch,
        /// Stop after this many seconds (default: until the server closes).
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Estimate delay and fidelity from a robot and an avatar capture.
    LatencyReport {
        #[arg(long)]
        robot: PathBuf,
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn init_logging() {
    let filter = EnvFilter::try_from_env("TWINLIFT_LOG").unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(Failure::runtime)
}

async fn ctrl_c() {
    if tokio::signal::ctrl_c().await.is_err() {
        std::future::pending::<()>().await;
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { scenario, out } => {
            let s = load_scenario(scenario.as_deref())?;
            let r = commands::simulate(&s, &out)?;
            print!("{}", describe_summary(&r.summary));
            println!("wrote {}", r.summary_path.display());
        }
        Command::PickAndPlace { out, write_scenario } => {
            let s = ScenarioFile::pick_and_place();
            if let Some(p) = write_scenario {
                write_file(&p, &s.to_toml())?;
            }
            let r = commands::simulate(&s, &out)?;
            print!("{}", describe_summary(&r.summary));
            if let Some(w) = r.log.records.windows(2).find(|w| w[1].mass > w[0].mass) {
                println!("payload attached at t = {:.3} s: mass {:.3} -> {:.3} kg", w[1].t, w[0].mass, w[1].mass);
            }
            println!("wrote {}", r.summary_path.display());
        }
        Command::Serve {
            scenario,
            host,
            port,
            delay,
            jitter,
            seed,
            realtime,
            capture,
            avatar,
            duration,
            out,
            pick_and_place,
        } => {
            let mut s = if pick_and_place { ScenarioFile::pick_and_place() } else { load_scenario(scenario.as_deref())? };
            let b = &mut s.bridge;
            if let Some(h) = host {
                b.host = h;
            }
            if let Some(p) = port {
                b.port = p;
            }
            if let Some(d) = delay {
                b.delay = d;
            }
            if let Some(j) = jitter {
                b.jitter = j;
            }
            if let Some(seed) = seed {
                b.seed = seed;
                s.sim.seed = seed;
            }
            if let Some(r) = realtime {
                s.bridge.realtime = r.on();
            }
            if let Some(c) = capture {
                s.bridge.capture = c.on();
            }
            let duration = match duration {
                Some(d) if d < 0.0 || !d.is_finite() => return Err(Failure::config("--duration must be >= 0")),
                Some(d) if d == 0.0 => None,
                Some(d) => Some(d),
                None => Some(s.sim.duration),
            };
            let opts = ServeOptions { scenario: s, out, duration, avatar: avatar.on() };
            let rt = runtime()?;
            let report = rt.block_on(async {
                let server = serve::bind(opts).await?;
                println!("listening on ws://{}", server.local_addr());
                server.run(ctrl_c()).await
            })?;
            println!(
                "sim time {:.2} s, {} snapshots, {} frames published, {} delivered, {} dropped, {} operator commands",
                report.sim_time, report.snapshots, report.published, report.delivered, report.dropped, report.commands
            );
            if let Some(f) = &report.fidelity {
                print!("{}", describe_report(f));
            }
            println!("wrote {}", report.summary_path.display());
        }
        Command::Avatar { url, out, capture, duration } => {
            commands::ensure_dir(&out)?;
            let opts = AvatarOptions {
                url,
                capture: capture.on().then(|| out.join(AVATAR_CAPTURE)),
                duration,
                connect_timeout: Duration::from_secs(10),
            };
            let rt = runtime()?;
            let r = rt.block_on(run_avatar(opts, ctrl_c()))?;
            let c = r.counters;
            println!("received {}, applied {}, stale {}, rejected {}", c.received, c.applied, c.stale, c.rejected);
            if let Some(p) = r.capture {
                println!("wrote {} ({} frames)", p.display(), r.captured);
            }
        }
        Command::LatencyReport { robot, avatar, out } => {
            let r = commands::latency_report(&robot, &avatar, &out)?;
            print!("{}", describe_report(&r.report));
            println!("wrote {} and {}", r.paired_csv.display(), r.report_json.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            f.exit_code()
        }
    }
}
