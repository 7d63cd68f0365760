//! Core of toolweave: the workflow model, tool integration, data management,
//! standard components and the dataflow execution engine.

pub mod components;
pub mod datum;
pub mod engine;
pub mod model;
pub mod store;
pub mod tool;

use std::time::{SystemTime, UNIX_EPOCH};

/// Current UTC time in milliseconds since the epoch.
pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}
