//! Simulation and telemetry core of a teleoperated aerial manipulator twin.
//!
//! - [`se3`]: rotation primitives (hat/vee, ZYX Euler, reprojection)
//! - [`dynamics`]: coupled base + arm model
//! - [`controller`]: geometric thrust/attitude controller
//! - [`sim`]: fixed-step closed loop, events, logs
//! - [`bridge`]: pub/sub wire format, broker, delay injection, latency estimation
//! - [`avatar`]: the mirrored twin and fidelity reports
//! - [`scenario`]: scenario files

pub mod se3;
pub mod dynamics;
pub mod controller;
pub mod sim;
pub mod bridge;
pub mod avatar;
pub mod scenario;
