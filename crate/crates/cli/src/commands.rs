//! Headless commands: simulate, pick-and-place, latency-report.

use crate::failure::Failure;
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use twinlift_core::avatar::{fidelity_report, paired_trace_csv, FidelityReport};
use twinlift_core::bridge::capture::{read_capture, CaptureLine};
use twinlift_core::bridge::EstimatorConfig;
use twinlift_core::scenario::ScenarioFile;
use twinlift_core::sim::{run_scenario, SimLog, SimSummary};

pub const DEFAULT_CONVERGENCE_THRESHOLD: f64 = 0.05;

pub fn load_scenario(path: Option<&Path>) -> Result<ScenarioFile, Failure> {
    match path {
        Some(p) => ScenarioFile::load(p).map_err(Failure::config),
        None => Ok(ScenarioFile::default()),
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub log: SimLog,
    pub summary: SimSummary,
    pub csv: Option<PathBuf>,
    pub summary_path: PathBuf,
}

pub fn simulate(scenario: &ScenarioFile, out: &Path) -> Result<SimulateOutput, Failure> {
    let log = run_scenario(&scenario.sim).map_err(|e| match e {
        twinlift_core::sim::SimError::InvalidConfig(_) => Failure::config(e),
        _ => Failure::runtime(e),
    })?;
    let threshold = scenario.logging.convergence_threshold.unwrap_or(DEFAULT_CONVERGENCE_THRESHOLD);
    let summary = log.summary(threshold);
    ensure_dir(out)?;
    let csv = if scenario.logging.csv {
        let p = out.join("sim.csv");
        write_file(&p, &log.to_csv())?;
        Some(p)
    } else {
        None
    };
    let summary_path = out.join("summary.json");
    let body = json!({ "scenario": scenario.name, "summary": summary });
    write_file(&summary_path, &(serde_json::to_string_pretty(&body).expect("summary serializes") + "\n"))?;
    Ok(SimulateOutput { log, summary, csv, summary_path })
}

pub fn read_capture_file(path: &Path) -> Result<Vec<CaptureLine>, Failure> {
    let file = fs::File::open(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    read_capture(std::io::BufReader::new(file)).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct LatencyReportOutput {
    pub report: FidelityReport,
    pub paired_csv: PathBuf,
    pub report_json: PathBuf,
}

pub fn latency_report(robot: &Path, avatar: &Path, out: &Path) -> Result<LatencyReportOutput, Failure> {
    let robot = read_capture_file(robot)?;
    let avatar = read_capture_file(avatar)?;
    let report = fidelity_report(&robot, &avatar, &EstimatorConfig::default()).map_err(Failure::estimator)?;
    ensure_dir(out)?;
    let paired_csv = out.join("paired.csv");
    write_file(&paired_csv, &paired_trace_csv(&robot, &avatar))?;
    let report_json = out.join("fidelity.json");
    write_file(&report_json, &(report.to_json().map_err(Failure::runtime)? + "\n"))?;
    Ok(LatencyReportOutput { report, paired_csv, report_json })
}

pub fn describe_report(r: &FidelityReport) -> String {
    let d = &r.delay;
    let mut s = format!("delay (cross-correlation): {:.4} s, peak correlation {:.4}\n", d.lag, d.correlation);
    match d.stamp_latency {
        Some(st) => s += &format!(
            "delay (timestamps):        mean {:.4} s, p95 {:.4} s, max {:.4} s over {} frames\n",
            st.mean, st.p95, st.max, st.samples
        ),
        None => s += "delay (timestamps):        n/a\n",
    }
    if let Some(dis) = d.disagreement {
        s += &format!("estimator disagreement:    {dis:.4} s\n");
    }
    s += &format!(
        "tracking residual:         mean {:.4} m, max {:.4} m over {} samples\n",
        r.mean_error, r.max_error, r.compared
    );
    s += &format!(
        "frames:                    {} published, {} received, {} lost, stale {:.1}% of the time\n",
        r.published,
        r.received,
        r.lost,
        100.0 * r.staleness_fraction
    );
    s
}

pub fn describe_summary(s: &SimSummary) -> String {
    let conv = s.convergence_time.map_or("never".to_string(), |t| format!("{t:.3} s"));
    format!(
        "duration {:.3} s, final |e_p| {:.5} m, peak |e_p| {:.4} m, peak |e_R| {:.4}, converged (< {} m) at {conv}\n",
        s.duration, s.final_ep_norm, s.peak_ep_norm, s.peak_er_norm, s.convergence_threshold
    )
}
