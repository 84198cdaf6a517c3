//! Scenario files: one TOML document holding the simulation, the bridge
//! and logging settings. Unknown keys are rejected.
//!
//! ```toml
//! [sim]
//! duration = 20.0
//! seed = 7
//!
//! [sim.initial]
//! position = [0.0, 0.0, -2.0]
//!
//! [[sim.events]]
//! t = 2.0
//! setpoint = { position = [1.0, 0.0, -2.0] }
//!
//! [bridge]
//! port = 9870
//! delay = 0.5
//! ```

use crate::sim::{pick_and_place_scenario, SimConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_PORT: u16 = 9870;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeSettings {
    pub host: String,
    pub port: u16,
    /// Injected one-way delay on `/servo` and `/data`, s.
    pub delay: f64,
    /// Half-width of the uniform jitter, s.
    pub jitter: f64,
    /// Seed of the jitter generator.
    pub seed: u64,
    /// Snapshot publish rate, Hz.
    pub publish_rate: f64,
    /// Pace the simulation against the wall clock.
    pub realtime: bool,
    /// Write robot and avatar capture files.
    pub capture: bool,
    /// Interval between `/metrics` publishes, s.
    pub metrics_interval: f64,
    /// Snapshots queued between the simulation and the bridge; the oldest
    /// is dropped when full.
    pub queue_capacity: usize,
}

impl Default for BridgeSettings {
    fn default() -> Self {
        Self {
            host: DEFAULT_HOST.into(),
            port: DEFAULT_PORT,
            delay: 0.0,
            jitter: 0.0,
            seed: 0,
            publish_rate: 50.0,
            realtime: true,
            capture: true,
            metrics_interval: 1.0,
            queue_capacity: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingSettings {
    pub level: LogLevel,
    /// Write the simulation CSV.
    pub csv: bool,
    /// Convergence threshold used in the run summary, m.
    pub convergence_threshold: Option<f64>,
}

impl Default for LoggingSettings {
    fn default() -> Self {
        Self { level: LogLevel::Info, csv: true, convergence_threshold: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: Option<String>,
    pub sim: SimConfig,
    pub bridge: BridgeSettings,
    pub logging: LoggingSettings,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

impl LogLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            LogLevel::Error => "error",
            LogLevel::Warn => "warn",
            LogLevel::Info => "info",
            LogLevel::Debug => "debug",
            LogLevel::Trace => "trace",
        }
    }
}

impl ScenarioError {
    fn invalid(key: &str, reason: impl Into<String>) -> Self {
        ScenarioError::Invalid { key: key.to_string(), reason: reason.into() }
    }
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn pick_and_place() -> Self {
        Self { name: Some("pick-and-place".into()), sim: pick_and_place_scenario(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.sim.validate().map_err(|e| ScenarioError::invalid("sim", e.to_string()))?;
        let b = &self.bridge;
        if b.host.is_empty() {
            return Err(ScenarioError::invalid("bridge.host", "must not be empty"));
        }
        if !(b.delay >= 0.0 && b.delay.is_finite()) {
            return Err(ScenarioError::invalid("bridge.delay", format!("must be >= 0, got {}", b.delay)));
        }
        if !(b.jitter >= 0.0 && b.jitter.is_finite()) {
            return Err(ScenarioError::invalid("bridge.jitter", format!("must be >= 0, got {}", b.jitter)));
        }
        if !(b.publish_rate > 0.0 && b.publish_rate <= 1000.0) {
            return Err(ScenarioError::invalid("bridge.publish_rate", format!("must lie in (0, 1000] Hz, got {}", b.publish_rate)));
        }
        if !(b.metrics_interval > 0.0 && b.metrics_interval.is_finite()) {
            return Err(ScenarioError::invalid("bridge.metrics_interval", "must be > 0"));
        }
        if b.queue_capacity == 0 {
            return Err(ScenarioError::invalid("bridge.queue_capacity", "must be >= 1"));
        }
        if let Some(th) = self.logging.convergence_threshold {
            if !(th > 0.0) {
                return Err(ScenarioError::invalid("logging.convergence_threshold", "must be > 0"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Event;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ScenarioFile::from_toml("").unwrap(), ScenarioFile::default());
        assert_eq!(ScenarioFile::default().bridge.port, 9870);
    }

    #[test]
    fn doc_example_parses() {
        let text = r#"
[sim]
duration = 20.0
seed = 7

[sim.initial]
position = [0.0, 0.0, -2.0]

[[sim.events]]
t = 2.0
setpoint = { position = [1.0, 0.0, -2.0] }

[bridge]
port = 9870
delay = 0.5
"#;
        let s = ScenarioFile::from_toml(text).unwrap();
        assert_eq!(s.sim.seed, 7);
        assert_eq!(s.bridge.delay, 0.5);
        assert!(matches!(s.sim.events[0].event, Event::Setpoint(_)));
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in [
            ("[sim]\ndtt = 0.01\n", "dtt"),
            ("[bridge]\ndelay_s = 0.5\n", "delay_s"),
            ("colour = 1\n", "colour"),
            ("[sim.vehicle]\nmas = 1.0\n", "mas"),
        ] {
            let err = ScenarioFile::from_toml(text).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn invalid_values_are_named() {
        let err = ScenarioFile::from_toml("[bridge]\ndelay = -1.0\n").unwrap_err();
        assert!(matches!(&err, ScenarioError::Invalid { key, .. } if key == "bridge.delay"), "{err}");
        let err = ScenarioFile::from_toml("[sim]\ndt = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("dt"), "{err}");
    }

    #[test]
    fn pick_and_place_round_trips_through_toml() {
        let s = ScenarioFile::pick_and_place();
        let text = s.to_toml();
        assert_eq!(ScenarioFile::from_toml(&text).unwrap(), s);
    }
}
