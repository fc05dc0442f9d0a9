//! IPv6 periphery measurement: target generation, a backend-agnostic probe
//! engine, prefix selection, loop detection, service fingerprinting, LLM
//! exposure verification and reporting, with a simulated network backend.

#![allow(clippy::result_large_err)]

pub mod engine;
pub mod hlev;
pub mod loops;
pub mod pipeline;
pub mod prefix;
pub mod proto;
pub mod report;
pub mod rgps;
pub mod services;
pub mod simnet;
pub mod target;
pub mod wire;
