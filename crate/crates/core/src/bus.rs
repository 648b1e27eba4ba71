//! In-process message fabric.
//!
//! Every envelope is keyed by `(sender, msg_id)`; a key is accepted at most
//! once. Inboxes are drained in `(tick, sender, msg_id)` order, which keeps
//! per-sender FIFO because a sender's ticks never decrease.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Event, RecordId, RobotId, RobotStatus, StepId, TaskStatus};

pub const MANAGER: &str = "task_manager";
pub const GATEWAY: &str = "gateway";
/// Recipient string that fans out to every registered endpoint but the sender.
pub const BROADCAST: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgKind {
    AssignTask,
    CancelTask,
    StatusUpdate,
    EventReport,
    HumanInput,
    HelpRequest,
    HelpDone,
    PlanPosted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamStep {
    pub assignee: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Payload {
    AssignTask {
        record_id: RecordId,
        /// Dispatch generation; status updates quote it back.
        epoch: u32,
        step_id: StepId,
        instruction: String,
        #[serde(default)]
        sync_peers: Vec<RobotId>,
    },
    CancelTask { record_id: RecordId, epoch: u32 },
    StatusUpdate {
        record_id: RecordId,
        epoch: u32,
        status: TaskStatus,
        #[serde(default)]
        reason: Option<String>,
        robot: RobotStatus,
    },
    EventReport { event: Event },
    HumanInput { from: String, text: String },
    HelpRequest { record_id: RecordId, human: String, instruction: String },
    HelpDone { record_id: RecordId },
    /// Non-completed team instructions, for event relevance checks.
    PlanPosted { plan_id: String, team: Vec<TeamStep> },
}

impl Payload {
    pub fn kind(&self) -> MsgKind {
        match self {
            Payload::AssignTask { .. } => MsgKind::AssignTask,
            Payload::CancelTask { .. } => MsgKind::CancelTask,
            Payload::StatusUpdate { .. } => MsgKind::StatusUpdate,
            Payload::EventReport { .. } => MsgKind::EventReport,
            Payload::HumanInput { .. } => MsgKind::HumanInput,
            Payload::HelpRequest { .. } => MsgKind::HelpRequest,
            Payload::HelpDone { .. } => MsgKind::HelpDone,
            Payload::PlanPosted { .. } => MsgKind::PlanPosted,
        }
    }

    fn check(&self) -> Result<(), String> {
        match self {
            Payload::AssignTask { instruction, .. } | Payload::HelpRequest { instruction, .. }
                if instruction.trim().is_empty() =>
            {
                Err("empty instruction".into())
            }
            Payload::HumanInput { text, .. } if text.trim().is_empty() => Err("empty text".into()),
            Payload::EventReport { event } if event.relevance != crate::domain::Relevance::Relevant => {
                Err("only relevant events are reported".into())
            }
            Payload::StatusUpdate { robot, .. } if !robot.position.is_finite() => {
                Err("non-finite robot position".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub msg_id: u64,
    pub sender: String,
    pub recipient: String,
    pub tick: u64,
    #[serde(flatten)]
    pub payload: Payload,
}

impl Envelope {
    pub fn kind(&self) -> MsgKind {
        self.payload.kind()
    }

    /// Parse and schema-check one JSON envelope.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let env: Envelope = serde_json::from_str(text).map_err(|e| e.to_string())?;
        env.payload.check()?;
        Ok(env)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendResult {
    Accepted,
    /// Same `(sender, msg_id)` seen before; nothing enqueued.
    Duplicate,
}

#[derive(Debug, Default)]
pub struct Bus {
    endpoints: BTreeSet<String>,
    next_id: BTreeMap<String, u64>,
    last_tick: BTreeMap<String, u64>,
    seen: HashSet<(String, u64)>,
    inboxes: BTreeMap<String, Vec<Envelope>>,
    log: Vec<Envelope>,
    flushed: usize,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, endpoint: impl Into<String>) {
        let e = endpoint.into();
        self.inboxes.entry(e.clone()).or_default();
        self.endpoints.insert(e);
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &str> {
        self.endpoints.iter().map(String::as_str)
    }

    /// Allocate the sender's next id.
    pub fn next_msg_id(&mut self, sender: &str) -> u64 {
        let n = self.next_id.entry(sender.to_string()).or_insert(0);
        *n += 1;
        *n
    }

    /// Build and send in one go with a fresh id.
    pub fn post(&mut self, sender: &str, recipient: &str, tick: u64, payload: Payload) -> Result<u64, String> {
        let msg_id = self.next_msg_id(sender);
        self.send(Envelope { msg_id, sender: sender.into(), recipient: recipient.into(), tick, payload })?;
        Ok(msg_id)
    }

    pub fn send(&mut self, env: Envelope) -> Result<SendResult, String> {
        if env.sender.is_empty() {
            return Err("empty sender".into());
        }
        env.payload.check()?;
        if self.seen.contains(&(env.sender.clone(), env.msg_id)) {
            return Ok(SendResult::Duplicate);
        }
        if env.recipient != BROADCAST && !self.endpoints.contains(&env.recipient) {
            return Err(format!("unknown recipient {}", env.recipient));
        }
        if self.last_tick.get(&env.sender).is_some_and(|&t| env.tick < t) {
            return Err(format!("tick {} precedes sender's previous message", env.tick));
        }
        self.last_tick.insert(env.sender.clone(), env.tick);
        self.seen.insert((env.sender.clone(), env.msg_id));
        let ids = self.next_id.entry(env.sender.clone()).or_insert(0);
        *ids = (*ids).max(env.msg_id);
        if env.recipient == BROADCAST {
            for ep in self.endpoints.iter().filter(|e| **e != env.sender) {
                self.inboxes.entry(ep.clone()).or_default().push(env.clone());
            }
        } else {
            self.inboxes.entry(env.recipient.clone()).or_default().push(env.clone());
        }
        self.log.push(env);
        Ok(SendResult::Accepted)
    }

    pub fn pending(&self, recipient: &str) -> usize {
        self.inboxes.get(recipient).map_or(0, Vec::len)
    }

    pub fn drain(&mut self, recipient: &str) -> Vec<Envelope> {
        let mut out = self.inboxes.get_mut(recipient).map(std::mem::take).unwrap_or_default();
        out.sort_by(|a, b| (a.tick, &a.sender, a.msg_id).cmp(&(b.tick, &b.sender, b.msg_id)));
        out
    }

    /// Every accepted envelope, in acceptance order.
    pub fn log(&self) -> &[Envelope] {
        &self.log
    }

    /// Write envelopes accepted since the last flush as JSON lines.
    pub fn flush_to(&mut self, out: &mut impl Write) -> std::io::Result<()> {
        for env in &self.log[self.flushed..] {
            serde_json::to_writer(&mut *out, env)?;
            out.write_all(b"\n")?;
        }
        self.flushed = self.log.len();
        out.flush()
    }

    pub fn log_jsonl(&self) -> String {
        let mut s = String::new();
        for env in &self.log {
            s.push_str(&serde_json::to_string(env).expect("envelope serializes"));
            s.push('\n');
        }
        s
    }

    pub fn log_hash(&self) -> String {
        hex::encode(Sha256::digest(self.log_jsonl().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(text: &str) -> Payload {
        Payload::HumanInput { from: "user".into(), text: text.into() }
    }

    fn env(sender: &str, id: u64, tick: u64) -> Envelope {
        Envelope { msg_id: id, sender: sender.into(), recipient: MANAGER.into(), tick, payload: input("x") }
    }

    fn bus() -> Bus {
        let mut b = Bus::new();
        for e in [MANAGER, "a", "b"] {
            b.register(e);
        }
        b
    }

    #[test]
    fn duplicate_envelope_enqueued_once() {
        let mut b = bus();
        assert_eq!(b.send(env("a", 1, 0)).unwrap(), SendResult::Accepted);
        assert_eq!(b.send(env("a", 1, 0)).unwrap(), SendResult::Duplicate);
        assert_eq!(b.drain(MANAGER).len(), 1);
        assert_eq!(b.log().len(), 1);
    }

    #[test]
    fn cross_sender_merge_by_tick() {
        let mut b = bus();
        b.send(env("a", 1, 3)).unwrap();
        b.send(env("a", 2, 5)).unwrap();
        b.send(env("b", 1, 4)).unwrap();
        let order: Vec<(String, u64)> = b.drain(MANAGER).into_iter().map(|e| (e.sender, e.tick)).collect();
        assert_eq!(order, vec![("a".into(), 3), ("b".into(), 4), ("a".into(), 5)]);
        assert!(b.drain(MANAGER).is_empty());
    }

    #[test]
    fn schema_mismatch_rejected() {
        let mut b = bus();
        let mut e = env("a", 1, 0);
        e.payload = input("   ");
        assert!(b.send(e).is_err());
        assert!(Envelope::from_json(r#"{"msg_id":1,"sender":"a","recipient":"b","tick":0,"kind":"HUMAN_INPUT","payload":{"text":3}}"#).is_err());
    }

    #[test]
    fn broadcast_skips_sender() {
        let mut b = bus();
        b.post(MANAGER, BROADCAST, 0, Payload::PlanPosted { plan_id: "p".into(), team: vec![] }).unwrap();
        assert_eq!(b.pending("a"), 1);
        assert_eq!(b.pending("b"), 1);
        assert_eq!(b.pending(MANAGER), 0);
    }

    #[test]
    fn envelope_json_round_trip() {
        let e = env("a", 7, 2);
        let text = serde_json::to_string(&e).unwrap();
        assert!(text.contains(r#""kind":"HUMAN_INPUT""#));
        assert_eq!(Envelope::from_json(&text).unwrap(), e);
    }
}
