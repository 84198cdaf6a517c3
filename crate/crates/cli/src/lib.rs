//! Command-line driver for the twinlift aerial manipulator twin.
//!
//! The binary is a thin clap front end over these modules so that tests
//! and other tools can drive the same code paths in-process.

pub mod avatar_client;
pub mod commands;
pub mod failure;
pub mod serve;

pub use failure::{Failure, FailureKind};
