//! Simulation and policy library for parameter-centric GPU memory
//! management across LLM serving instances.

pub mod batching;
pub mod config;
pub mod cost;
pub mod error;
pub mod eventlog;
pub mod memory;
pub mod metrics;
pub mod network;
pub mod planner;
pub mod runner;
pub mod sim;
pub mod trace;
pub mod types;

pub use error::{Error, Result};
