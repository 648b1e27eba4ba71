//! Multi-robot coordination core: a centralized task manager, decentralized
//! robot agents, a message bus and a deterministic 2D world.

pub mod agent;
pub mod benchmark;
pub mod bus;
pub mod domain;
pub mod error;
pub mod gateway;
pub mod language;
pub mod manager;
pub mod planner;
pub mod rules;
pub mod runtime;
pub mod world;

pub use domain::{
    Assignment, ChatEntry, ChatHistory, ChatRole, Event, Observation, Plan, RecordId, Relevance, RobotId, RobotSpec,
    RobotStatus, ScenarioConfig, TaskClass, TaskRecord, TaskStatus, Vec2,
};
pub use error::CoreError;
pub use runtime::{RunOutcome, RunReport, Runtime, Scenario};
