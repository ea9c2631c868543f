//! Discrete-event simulation of a serving cluster.

pub mod engine;
pub mod events;
pub mod pipeline;

pub use engine::{SimOutput, SimStats, Simulation, TimelineRow};
