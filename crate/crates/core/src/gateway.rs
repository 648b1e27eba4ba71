//! Wire types shared with the chat front end.
//!
//! Every server push is a [`Frame`] `{type, payload, tick, ts}`. `ts` is wall
//! clock milliseconds and is the only nondeterministic field.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{ChatEntry, TaskRecord};
use crate::manager::ManagerSnapshot;
use crate::world::WorldSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameType {
    /// One new chat history entry.
    Chat,
    /// Task records after a change.
    Tasks,
    /// World snapshot.
    World,
    /// Run finished; payload is the run report.
    Done,
    /// Rejected client input.
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    #[serde(rename = "type")]
    pub kind: FrameType,
    pub payload: Value,
    pub tick: u64,
    pub ts: u64,
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Frame {
    pub fn new(kind: FrameType, payload: impl Serialize, tick: u64) -> Self {
        Self { kind, payload: serde_json::to_value(payload).unwrap_or(Value::Null), tick, ts: now_ms() }
    }

    pub fn chat(entry: &ChatEntry) -> Self {
        Self::new(FrameType::Chat, entry, entry.tick)
    }

    pub fn tasks(records: &[TaskRecord], tick: u64) -> Self {
        Self::new(FrameType::Tasks, records, tick)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frame serializes")
    }
}

/// Message a client may send over the socket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum ClientMessage {
    /// Operator utterance, routed like any human input.
    UserInput { text: String },
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, String> {
        let m: ClientMessage = serde_json::from_str(text).map_err(|e| format!("bad client message: {e}"))?;
        match &m {
            ClientMessage::UserInput { text } if text.trim().is_empty() => Err("empty user input".into()),
            _ => Ok(m),
        }
    }
}

/// Body of `GET /snapshot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: u64,
    pub world: WorldSnapshot,
    pub manager: ManagerSnapshot,
    pub chat: Vec<ChatEntry>,
    pub finished: bool,
}
