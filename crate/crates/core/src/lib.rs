//! Cooperative lane-change simulation, reward model and reinforcement-learning
//! trainers for connected and human-driven vehicles.

pub mod algorithms;
pub mod dynamics;
pub mod environment;
pub mod harness;
pub mod neural;
pub mod rewards;
pub mod world;
