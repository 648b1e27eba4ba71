//! Shared vocabulary: scenario configuration, plans, task records, events
//! and the chat history.
//!
//! Everything here is a plain value type. Task records are only mutated by
//! the task manager, through [`TaskRecord::transition`], which enforces the
//! three legal status edges.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

pub type RobotId = String;
pub type EntityId = String;
pub type StepId = String;
pub type RecordId = u64;

/// A point on the floor plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Vec2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn add(self, other: Vec2) -> Vec2 {
        Vec2::new(self.x + other.x, self.y + other.y)
    }

    pub fn sub(self, other: Vec2) -> Vec2 {
        Vec2::new(self.x - other.x, self.y - other.y)
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    /// Move at most `max_step` toward `target`.
    pub fn step_toward(self, target: Vec2, max_step: f64) -> Vec2 {
        let d = self.distance(target);
        if d <= max_step || d == 0.0 {
            target
        } else {
            self.add(target.sub(self).scale(max_step / d))
        }
    }
}

impl fmt::Display for Vec2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", fmt_num(self.x), fmt_num(self.y))
    }
}

/// Shortest decimal form, with two decimals at most.
pub fn fmt_num(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    let r = if r == 0.0 { 0.0 } else { r };
    let s = format!("{r:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    #[serde(default = "default_posture")]
    pub posture: String,
}

fn default_posture() -> String {
    "standing".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSpec {
    pub id: RobotId,
    #[serde(default)]
    pub kind: String,
    pub capabilities: BTreeSet<String>,
    #[serde(default)]
    pub constraints: Vec<String>,
    pub initial_pose: Pose,
    /// Skill library entries (see `agent::SkillLibraryEntry`).
    #[serde(default)]
    pub skills: Vec<crate::agent::SkillLibraryEntry>,
    /// Meters per tick.
    #[serde(default = "default_speed")]
    pub speed: f64,
    /// Sensing radius in meters for robots carrying a camera.
    #[serde(default = "default_sensing_radius")]
    pub sensing_radius: f64,
    /// Manipulation reach in meters.
    #[serde(default = "default_reach")]
    pub reach: f64,
    /// Alternative names the robot answers to ("quadruped", "go2").
    #[serde(default)]
    pub aliases: Vec<String>,
}

pub fn default_speed() -> f64 {
    0.5
}
pub fn default_sensing_radius() -> f64 {
    3.0
}
pub fn default_reach() -> f64 {
    0.6
}

impl RobotSpec {
    pub fn has(&self, cap: &str) -> bool {
        self.capabilities.contains(cap)
    }

    pub fn covers<'a>(&self, caps: impl IntoIterator<Item = &'a String>) -> bool {
        caps.into_iter().all(|c| self.capabilities.contains(c))
    }

    /// Parsed constraint clauses; unparseable clauses are skipped.
    pub fn constraint_clauses(&self) -> Vec<ConstraintClause> {
        self.constraints.iter().filter_map(|c| ConstraintClause::parse(c)).collect()
    }

    /// Posture this robot must hold before anything is placed on it.
    pub fn required_posture_for_loading(&self) -> Option<String> {
        self.constraint_clauses().into_iter().find_map(|c| match c {
            ConstraintClause::RequiresPosture { action, posture } if action == "place_on" => Some(posture),
            _ => None,
        })
    }
}

/// Named predicate form of a robot constraint clause.
///
/// Recognised grammar: `<action> requires <posture>`, for example
/// `place_on requires sitting` (nothing can be placed on the robot unless it
/// sits). Free-text clauses that do not match are kept verbatim for
/// prompts but carry no executable meaning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConstraintClause {
    RequiresPosture { action: String, posture: String },
}

impl ConstraintClause {
    pub fn parse(text: &str) -> Option<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        match words.as_slice() {
            [action, "requires", posture] => Some(ConstraintClause::RequiresPosture {
                action: action.to_ascii_lowercase(),
                posture: posture.to_ascii_lowercase(),
            }),
            _ => None,
        }
    }
}

/// Skill verb that puts a robot into `posture` ("sitting" → "sit").
pub fn canonical_posture_verb(posture: &str) -> String {
    match posture {
        "sitting" => "sit".into(),
        "standing" => "stand".into(),
        p => p.strip_suffix("ing").unwrap_or(p).to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: EntityId,
    #[serde(default)]
    pub kind: String,
    pub position: Vec2,
    /// Entity the object rests on / is carried by at tick 0.
    #[serde(default)]
    pub attached_to: Option<EntityId>,
    #[serde(default)]
    pub aliases: Vec<String>,
    /// Containers capture pushed objects landing near them.
    #[serde(default)]
    pub container: bool,
    /// Reported as "appeared" the first time a camera sees it.
    #[serde(default)]
    pub discoverable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: Vec2,
    pub max: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub robots: Vec<RobotSpec>,
    #[serde(default)]
    pub humans: Vec<String>,
    #[serde(default)]
    pub rules: Vec<String>,
    #[serde(default)]
    pub locations: BTreeMap<String, Vec2>,
    #[serde(default)]
    pub regions: BTreeMap<String, Region>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

impl ScenarioConfig {
    pub fn robot(&self, id: &str) -> Option<&RobotSpec> {
        self.robots.iter().find(|r| r.id == id)
    }

    pub fn is_human(&self, id: &str) -> bool {
        self.humans.iter().any(|h| h == id)
    }

    pub fn object(&self, id: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Robots sorted by id, which is the allocation tie-break order.
    pub fn robots_sorted(&self) -> Vec<&RobotSpec> {
        let mut v: Vec<&RobotSpec> = self.robots.iter().collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Check every scenario invariant; an empty list means the config is valid.
pub fn validate_scenario(config: &ScenarioConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if config.name.trim().is_empty() {
        out.push(Violation::new("name", "empty scenario name"));
    }
    if config.robots.is_empty() {
        out.push(Violation::new("robots", "no robots"));
    }
    let mut seen: HashSet<String> = HashSet::new();
    let mut check_id = |field: String, id: &str, out: &mut Vec<Violation>| {
        if id.trim().is_empty() {
            out.push(Violation::new(field, "empty id"));
        } else if !seen.insert(id.to_string()) {
            out.push(Violation::new(field, format!("duplicate id \"{id}\"")));
        }
    };
    for (i, r) in config.robots.iter().enumerate() {
        check_id(format!("robots[{i}].id"), &r.id, &mut out);
    }
    for (i, h) in config.humans.iter().enumerate() {
        check_id(format!("humans[{i}]"), h, &mut out);
    }
    for (i, o) in config.objects.iter().enumerate() {
        check_id(format!("objects[{i}].id"), &o.id, &mut out);
    }
    for (i, r) in config.robots.iter().enumerate() {
        if r.capabilities.is_empty() {
            out.push(Violation::new(format!("robots[{i}].capabilities"), "empty capabilities"));
        }
        if !r.initial_pose.position.is_finite() {
            out.push(Violation::new(format!("robots[{i}].initial_pose"), "non-finite position"));
        }
        if !(r.speed.is_finite() && r.speed > 0.0) {
            out.push(Violation::new(format!("robots[{i}].speed"), "speed must be positive"));
        }
        if !(r.sensing_radius.is_finite() && r.sensing_radius >= 0.0) {
            out.push(Violation::new(format!("robots[{i}].sensing_radius"), "negative or non-finite radius"));
        }
        let mut names = HashSet::new();
        for s in &r.skills {
            if !names.insert(s.name.as_str()) {
                out.push(Violation::new(format!("robots[{i}].skills"), format!("duplicate skill \"{}\"", s.name)));
            }
            if crate::world::SkillKind::from_name(&s.name).is_none() {
                out.push(Violation::new(format!("robots[{i}].skills"), format!("unknown skill \"{}\"", s.name)));
            }
        }
    }
    for (name, p) in &config.locations {
        if !p.is_finite() {
            out.push(Violation::new(format!("locations.{name}"), "non-finite coordinate"));
        }
    }
    for (i, o) in config.objects.iter().enumerate() {
        if !o.position.is_finite() {
            out.push(Violation::new(format!("objects[{i}].position"), "non-finite coordinate"));
        }
        if let Some(parent) = &o.attached_to {
            let known = config.robot(parent).is_some() || config.object(parent).is_some();
            if !known {
                out.push(Violation::new(format!("objects[{i}].attached_to"), format!("unknown parent \"{parent}\"")));
            }
        }
    }
    // attachment forest over objects
    for o in &config.objects {
        let mut cur = o.attached_to.clone();
        let mut hops = 0;
        while let Some(p) = cur {
            if p == o.id || hops > config.objects.len() {
                out.push(Violation::new(format!("objects.{}", o.id), "attachment cycle"));
                break;
            }
            cur = config.object(&p).and_then(|x| x.attached_to.clone());
            hops += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskClass {
    Independent,
    Sequential,
    Coordinated,
    Infeasible,
}

impl fmt::Display for TaskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskClass::Independent => "INDEPENDENT",
            TaskClass::Sequential => "SEQUENTIAL",
            TaskClass::Coordinated => "COORDINATED",
            TaskClass::Infeasible => "INFEASIBLE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskStatus {
    InProgress,
    Completed,
    Interrupted,
}

impl TaskStatus {
    pub fn can_transition(self, to: TaskStatus) -> bool {
        matches!(
            (self, to),
            (TaskStatus::InProgress, TaskStatus::Completed)
                | (TaskStatus::InProgress, TaskStatus::Interrupted)
                | (TaskStatus::Interrupted, TaskStatus::InProgress)
        )
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskStatus::InProgress => "IN_PROGRESS",
            TaskStatus::Completed => "COMPLETED",
            TaskStatus::Interrupted => "INTERRUPTED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotStatus {
    pub posture: Option<String>,
    pub position: Vec2,
    pub busy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub step_id: StepId,
    pub assignee: String,
    pub instruction: String,
    #[serde(default)]
    pub required_capabilities: BTreeSet<String>,
    #[serde(default)]
    pub depends_on: BTreeSet<StepId>,
    #[serde(default)]
    pub sync_group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    #[serde(default)]
    pub plan_id: String,
    pub classes: BTreeSet<TaskClass>,
    pub steps: Vec<Assignment>,
    #[serde(default)]
    pub source_command_id: String,
}

impl Plan {
    pub fn step(&self, id: &str) -> Option<&Assignment> {
        self.steps.iter().find(|s| s.step_id == id)
    }

    pub fn is_infeasible(&self) -> bool {
        self.classes.contains(&TaskClass::Infeasible)
    }

    /// Structural invariants. `humans` decides which assignees count as
    /// human for the INFEASIBLE rule.
    pub fn check_structure(&self, is_human: impl Fn(&str) -> bool) -> Result<(), CoreError> {
        if self.classes.is_empty() && !self.steps.is_empty() {
            return Err(CoreError::InvalidPlan("no task class".into()));
        }
        if self.classes.contains(&TaskClass::Infeasible) && self.classes.len() > 1 {
            return Err(CoreError::InvalidPlan("INFEASIBLE combined with another class".into()));
        }
        if self.is_infeasible() && self.steps.iter().any(|s| !is_human(&s.assignee)) {
            return Err(CoreError::InvalidPlan("INFEASIBLE plan assigns robots".into()));
        }
        let mut ids = HashSet::new();
        for s in &self.steps {
            if !ids.insert(s.step_id.as_str()) {
                return Err(CoreError::InvalidPlan(format!("duplicate step_id {}", s.step_id)));
            }
        }
        for s in &self.steps {
            for d in &s.depends_on {
                if !ids.contains(d.as_str()) {
                    return Err(CoreError::InvalidPlan(format!("step {} depends on unknown step {d}", s.step_id)));
                }
            }
        }
        if let Some(cycle) = find_cycle(&self.steps) {
            return Err(CoreError::InvalidPlan(format!("cycle: {}", cycle.join("→"))));
        }
        let mut groups: BTreeMap<&str, &BTreeSet<StepId>> = BTreeMap::new();
        for s in &self.steps {
            if let Some(g) = &s.sync_group {
                if let Some(prev) = groups.insert(g, &s.depends_on) {
                    if prev != &s.depends_on {
                        return Err(CoreError::InvalidPlan(format!("sync_group {g} members disagree on depends_on")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Transitive prerequisites of `step`.
    pub fn ancestors(&self, step: &str) -> BTreeSet<StepId> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<StepId> = self.step(step).map(|s| s.depends_on.iter().cloned().collect()).unwrap_or_default();
        while let Some(s) = stack.pop() {
            if out.insert(s.clone()) {
                if let Some(a) = self.step(&s) {
                    stack.extend(a.depends_on.iter().cloned());
                }
            }
        }
        out
    }
}

/// Returns one dependency cycle, written as a closed walk, if any exists.
pub fn find_cycle(steps: &[Assignment]) -> Option<Vec<StepId>> {
    let index: BTreeMap<&str, &Assignment> = steps.iter().map(|s| (s.step_id.as_str(), s)).collect();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color: BTreeMap<&str, u8> = BTreeMap::new();
    fn dfs<'a>(
        node: &'a str,
        index: &BTreeMap<&'a str, &'a Assignment>,
        color: &mut BTreeMap<&'a str, u8>,
        path: &mut Vec<&'a str>,
    ) -> Option<Vec<StepId>> {
        color.insert(node, 1);
        path.push(node);
        if let Some(a) = index.get(node) {
            for d in &a.depends_on {
                let d = d.as_str();
                let Some((k, _)) = index.get_key_value(d) else { continue };
                match color.get(k).copied().unwrap_or(0) {
                    1 => {
                        let start = path.iter().position(|p| *p == d).unwrap_or(0);
                        let mut cyc: Vec<StepId> = path[start..].iter().map(|s| s.to_string()).collect();
                        cyc.push(d.to_string());
                        return Some(cyc);
                    }
                    0 => {
                        if let Some(c) = dfs(k, index, color, path) {
                            return Some(c);
                        }
                    }
                    _ => {}
                }
            }
        }
        path.pop();
        color.insert(node, 2);
        None
    }
    for s in steps {
        if color.get(s.step_id.as_str()).copied().unwrap_or(0) == 0 {
            let mut path = Vec::new();
            if let Some(c) = dfs(s.step_id.as_str(), &index, &mut color, &mut path) {
                return Some(c);
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Relevance {
    Relevant,
    Irrelevant,
    Unclassified,
}

/// Raw change in the world as seen by a sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    Appeared { entity: EntityId, position: Vec2, tick: u64 },
    Detached { entity: EntityId, from: EntityId, position: Vec2, tick: u64 },
    Moved { entity: EntityId, position: Vec2, tick: u64 },
    /// A pushed or thrown object came to rest relative to a container.
    Landed { entity: EntityId, container: EntityId, inside: bool, position: Vec2, tick: u64 },
}

impl Observation {
    pub fn entity(&self) -> &str {
        match self {
            Observation::Appeared { entity, .. }
            | Observation::Detached { entity, .. }
            | Observation::Moved { entity, .. }
            | Observation::Landed { entity, .. } => entity,
        }
    }

    pub fn position(&self) -> Vec2 {
        match self {
            Observation::Appeared { position, .. }
            | Observation::Detached { position, .. }
            | Observation::Moved { position, .. }
            | Observation::Landed { position, .. } => *position,
        }
    }

    pub fn tick(&self) -> u64 {
        match self {
            Observation::Appeared { tick, .. }
            | Observation::Detached { tick, .. }
            | Observation::Moved { tick, .. }
            | Observation::Landed { tick, .. } => *tick,
        }
    }

    /// Natural-language description used in reports and prompts.
    pub fn describe(&self) -> String {
        let name = |e: &str| e.replace('_', " ");
        match self {
            Observation::Appeared { entity, position, .. } => format!("{} appeared at {position}", name(entity)),
            Observation::Detached { entity, from, position, .. } => {
                format!("{} fell off the {} at {position}", name(entity), name(from))
            }
            Observation::Moved { entity, position, .. } => format!("{} moved to {position}", name(entity)),
            Observation::Landed { entity, container, inside: true, position, .. } => {
                format!("{} landed inside the {} at {position}", name(entity), name(container))
            }
            Observation::Landed { entity, container, inside: false, position, .. } => {
                format!("{} fell outside the {} at {position}", name(entity), name(container))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: String,
    pub source: String,
    pub description: String,
    pub tick: u64,
    pub relevance: Relevance,
    /// Structured form when the event came from a sensor.
    #[serde(default)]
    pub observation: Option<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChatRole {
    User,
    TaskManager,
    Event,
    Robot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatEntry {
    pub id: u64,
    pub role: ChatRole,
    pub text: String,
    /// Simulation time in milliseconds.
    pub timestamp: u64,
    pub tick: u64,
}

/// Append-only dialogue log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatHistory {
    entries: Vec<ChatEntry>,
}

/// Milliseconds of simulated time per tick.
pub const TICK_MS: u64 = 100;

impl ChatHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, role: ChatRole, text: impl Into<String>, tick: u64) -> &ChatEntry {
        let id = self.entries.len() as u64;
        let last = self.entries.last().map(|e| e.timestamp).unwrap_or(0);
        let timestamp = (tick * TICK_MS).max(last);
        self.entries.push(ChatEntry { id, role, text: text.into(), timestamp, tick });
        self.entries.last().expect("just pushed")
    }

    pub fn entries(&self) -> &[ChatEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries with id >= `from`.
    pub fn since(&self, from: u64) -> &[ChatEntry] {
        let start = (from as usize).min(self.entries.len());
        &self.entries[start..]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.entries).expect("chat history serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CoreError> {
        let entries: Vec<ChatEntry> = serde_json::from_str(text)?;
        for (i, w) in entries.windows(2).enumerate() {
            if w[1].timestamp < w[0].timestamp {
                return Err(CoreError::Invalid(format!("chat timestamps decrease at entry {}", i + 1)));
            }
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusChange {
    pub from: Option<TaskStatus>,
    pub to: TaskStatus,
    pub tick: u64,
    #[serde(default)]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub record_id: RecordId,
    pub assignment: Assignment,
    pub status: TaskStatus,
    pub owner: String,
    pub history: Vec<StatusChange>,
    /// Dropped by a later plan; never reconsidered.
    #[serde(default)]
    pub retired: bool,
}

impl TaskRecord {
    pub fn new(record_id: RecordId, assignment: Assignment, tick: u64) -> Self {
        let owner = assignment.assignee.clone();
        Self {
            record_id,
            assignment,
            status: TaskStatus::InProgress,
            owner,
            history: vec![StatusChange { from: None, to: TaskStatus::InProgress, tick, reason: None }],
            retired: false,
        }
    }

    pub fn transition(&mut self, to: TaskStatus, tick: u64, reason: Option<String>) -> Result<(), CoreError> {
        if !self.status.can_transition(to) {
            tracing::warn!(record = self.record_id, from = %self.status, to = %to, "rejected status transition");
            return Err(CoreError::IllegalTransition { record: self.record_id, from: self.status, to });
        }
        self.history.push(StatusChange { from: Some(self.status), to, tick, reason });
        self.status = to;
        Ok(())
    }

    /// Whether the transition log obeys the status graph.
    pub fn history_is_legal(&self) -> bool {
        let mut cur: Option<TaskStatus> = None;
        for h in &self.history {
            if h.from != cur {
                return false;
            }
            match cur {
                None if h.to != TaskStatus::InProgress => return false,
                Some(c) if !c.can_transition(h.to) => return false,
                _ => {}
            }
            cur = Some(h.to);
        }
        cur == Some(self.status)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn robot(id: &str, caps: &[&str]) -> RobotSpec {
        RobotSpec {
            id: id.into(),
            kind: "diff-drive".into(),
            capabilities: caps.iter().map(|s| s.to_string()).collect(),
            constraints: vec![],
            initial_pose: Pose { position: Vec2::ZERO, posture: "standing".into() },
            skills: vec![],
            speed: 0.5,
            sensing_radius: 3.0,
            reach: 0.6,
            aliases: vec![],
        }
    }

    fn config(robots: Vec<RobotSpec>) -> ScenarioConfig {
        ScenarioConfig {
            name: "t".into(),
            robots,
            humans: vec![],
            rules: vec![],
            locations: BTreeMap::new(),
            regions: BTreeMap::new(),
            objects: vec![],
        }
    }

    #[test]
    fn duplicate_robot_id_is_reported() {
        let c = config(vec![robot("waffle", &["navigate"]), robot("waffle", &["pick"])]);
        let v = validate_scenario(&c);
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("duplicate id \"waffle\""));
    }

    #[test]
    fn empty_capabilities_is_reported() {
        let c = config(vec![robot("burger", &[])]);
        let v = validate_scenario(&c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "empty capabilities");
    }

    #[test]
    fn non_finite_location_is_reported() {
        let mut c = config(vec![robot("burger", &["navigate"])]);
        c.locations.insert("catch_point".into(), Vec2::new(f64::NAN, 0.0));
        assert_eq!(validate_scenario(&c)[0].field, "locations.catch_point");
    }

    #[test]
    fn status_graph_has_three_edges() {
        use TaskStatus::*;
        let all = [InProgress, Completed, Interrupted];
        let legal: Vec<_> =
            all.iter().flat_map(|a| all.iter().map(move |b| (*a, *b))).filter(|(a, b)| a.can_transition(*b)).collect();
        assert_eq!(legal, vec![(InProgress, Completed), (InProgress, Interrupted), (Interrupted, InProgress)]);
    }

    #[test]
    fn completed_is_terminal() {
        let a = Assignment {
            step_id: "s1".into(),
            assignee: "go2".into(),
            instruction: "sit".into(),
            required_capabilities: BTreeSet::new(),
            depends_on: BTreeSet::new(),
            sync_group: None,
        };
        let mut r = TaskRecord::new(1, a, 0);
        r.transition(TaskStatus::Completed, 3, None).unwrap();
        assert!(r.transition(TaskStatus::InProgress, 4, None).is_err());
        assert!(r.transition(TaskStatus::Interrupted, 4, None).is_err());
        assert!(r.history_is_legal());
    }

    #[test]
    fn cycle_is_found() {
        let mk = |id: &str, deps: &[&str]| Assignment {
            step_id: id.into(),
            assignee: "a".into(),
            instruction: "x".into(),
            required_capabilities: BTreeSet::new(),
            depends_on: deps.iter().map(|s| s.to_string()).collect(),
            sync_group: None,
        };
        let cyc = find_cycle(&[mk("s1", &["s2"]), mk("s2", &["s1"])]).unwrap();
        assert_eq!(cyc, vec!["s1", "s2", "s1"]);
        assert!(find_cycle(&[mk("s1", &[]), mk("s2", &["s1"])]).is_none());
    }

    #[test]
    fn constraint_clause_grammar() {
        assert_eq!(
            ConstraintClause::parse("place_on requires sitting"),
            Some(ConstraintClause::RequiresPosture { action: "place_on".into(), posture: "sitting".into() })
        );
        assert_eq!(ConstraintClause::parse("arm reaches quadruped back only when sitting"), None);
    }

    #[test]
    fn chat_history_round_trips() {
        let mut h = ChatHistory::new();
        h.push(ChatRole::User, "Deliver the blue ball to (4,0)", 0);
        h.push(ChatRole::TaskManager, "plan", 1);
        let text = h.to_json();
        let back = ChatHistory::from_json(&text).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn vec2_display_is_compact() {
        assert_eq!(Vec2::new(3.0, 0.0).to_string(), "(3,0)");
        assert_eq!(Vec2::new(-1.25, 0.5).to_string(), "(-1.25,0.5)");
    }
}
