//! Discrete-event simulator for controller-driven agent serving.
//!
//! The crate models an agentic pipeline (e.g. a developer agent feeding a
//! tester agent) as simulated serving nodes joined by a reconfigurable
//! communication substrate. A metrics plane collects per-node telemetry into
//! ring buffers and serves windowed snapshots to a logically central
//! controller, which installs agent-level and request-level rules, routes
//! requests, and reconfigures link granularity and serving knobs at runtime
//! through a uniform set/reset surface.

pub mod control;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod shim;
pub mod sim;
