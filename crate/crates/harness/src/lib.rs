//! Experiment driver for the agent-serving simulator: configuration loading,
//! workload construction, load sweeps across communication policies, analytic
//! capacity bounds, and CSV reporting.

pub mod config;
pub mod experiment;
pub mod report;
pub mod workload;
