//! Capability-first multimodal agent runtime.

pub mod capability;
pub mod config;
pub mod evaluation;
pub mod images;
pub mod orchestrator;
pub mod protocol;
pub mod provider;
pub mod rundir;
pub mod remote;
pub mod session;
pub mod starter;
pub mod task;
pub mod toolkit;
pub mod trace;
