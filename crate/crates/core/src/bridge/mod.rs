//! Telemetry bridge between the simulated robot and its avatar.

pub mod broker;
pub mod capture;
pub mod codec;
pub mod delay;
pub mod estimate;
pub mod frame;

pub use broker::{Broker, BrokerError, ClientId, Delivery};
pub use capture::{CaptureError, CaptureLine, CaptureWriter};
pub use codec::{decode_frame, encode_frame, encode_frame_str, CanonicalWriter, CodecError};
pub use delay::{inject_delay, DelayLine, DelaySpec};
pub use estimate::{estimate_delay, DelayEstimate, EstimateError, EstimatorConfig, LatencyStats, Trace, TraceSample};
pub use frame::{ArmMessage, BridgeFrame, ClockSync, CommandMessage, MetricsMessage, Op, Payload, PoseMessage, Topic};
