//! Centralized deliberator.
//!
//! One [`TaskManager::cycle`] per tick: apply inbound statuses and reports in
//! inbox order, run at most one coalesced replan, plan queued commands, then
//! dispatch every step whose prerequisites are COMPLETED and whose assignee
//! is idle. Only this actor mutates task records.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bus::{Envelope, Payload, TeamStep, BROADCAST};
use crate::domain::{
    Assignment, ChatEntry, ChatHistory, ChatRole, Event, Plan, RecordId, RobotId, RobotStatus, ScenarioConfig, StepId,
    TaskRecord, TaskStatus,
};
use crate::language::canonical_step;
use crate::planner::{PlanRequest, Planner};
use crate::rules::HumanRoute;

pub const DEFAULT_RULES: &str = include_str!("../../../data/static_rules.txt");

/// Fixed rule text given to language-model planners.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticRules {
    pub text: String,
}

impl Default for StaticRules {
    fn default() -> Self {
        Self { text: DEFAULT_RULES.to_string() }
    }
}

impl StaticRules {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self { text: std::fs::read_to_string(path)? })
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }
}

/// A step of the live plan that is not COMPLETED.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenStep {
    pub assignment: Assignment,
    /// Command text the step descends from.
    pub command: String,
    pub status: Option<TaskStatus>,
    pub in_flight: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicContext {
    pub tick: u64,
    /// Every command received so far, oldest first.
    pub commands: Vec<String>,
    pub command: Option<String>,
    pub intent_change: Option<String>,
    pub history: Vec<ChatEntry>,
    pub robots: BTreeMap<RobotId, RobotStatus>,
    pub records: Vec<TaskRecord>,
    pub open_steps: Vec<OpenStep>,
    pub events: Vec<Event>,
    pub humans: Vec<String>,
}

pub const SECTION_ORDER: [&str; 6] = ["RULES", "CONFIG", "HISTORY", "STATUSES", "EVENTS", "COMMAND"];

const HUMAN_RULE: &str = "Humans are available. Assign a step to a human only when no robot's capabilities cover it; \
a human step blocks only the steps that depend on it.";

/// Deterministic prompt text. Sections appear in [`SECTION_ORDER`], each
/// opened by a `### NAME` line.
pub fn assemble_context(rules: &StaticRules, ctx: &DynamicContext, config: &ScenarioConfig) -> String {
    let mut out = String::new();
    out.push_str("### RULES\n");
    out.push_str(rules.text.trim_end());
    out.push('\n');
    if !config.humans.is_empty() {
        out.push_str(HUMAN_RULE);
        out.push('\n');
    }
    for r in &config.rules {
        out.push_str(&format!("- {r}\n"));
    }

    out.push_str("### CONFIG\n");
    out.push_str(&format!("scenario: {}\n", config.name));
    for r in config.robots_sorted() {
        let caps: Vec<&str> = r.capabilities.iter().map(String::as_str).collect();
        out.push_str(&format!("robot {} ({}): capabilities [{}]", r.id, r.kind, caps.join(", ")));
        if !r.constraints.is_empty() {
            out.push_str(&format!("; constraints [{}]", r.constraints.join("; ")));
        }
        out.push('\n');
    }
    for h in &config.humans {
        out.push_str(&format!("human {h}\n"));
    }
    for (n, p) in &config.locations {
        out.push_str(&format!("location {n} at {p}\n"));
    }
    for (n, r) in &config.regions {
        out.push_str(&format!("region {n} from {} to {}\n", r.min, r.max));
    }
    for o in &config.objects {
        out.push_str(&format!("object {} ({}) at {}", o.id, o.kind, o.position));
        if let Some(p) = &o.attached_to {
            out.push_str(&format!(" on {p}"));
        }
        out.push('\n');
    }

    out.push_str("### HISTORY\n");
    for e in &ctx.history {
        out.push_str(&format!("[{}] {}: {}\n", e.tick, role_label(e.role), e.text));
    }

    out.push_str("### STATUSES\n");
    for (id, s) in &ctx.robots {
        out.push_str(&format!(
            "robot {id}: posture {}, position {}, {}\n",
            s.posture.as_deref().unwrap_or("none"),
            s.position,
            if s.busy { "busy" } else { "idle" }
        ));
    }
    for r in ctx.records.iter().filter(|r| !r.retired) {
        out.push_str(&format!("task {} [{}] {}: {}\n", r.record_id, r.status, r.owner, r.assignment.instruction));
    }
    for s in ctx.open_steps.iter().filter(|s| s.status.is_none()) {
        out.push_str(&format!("task pending {}: {}\n", s.assignment.assignee, s.assignment.instruction));
    }

    out.push_str("### EVENTS\n");
    for e in &ctx.events {
        out.push_str(&format!("[{}] {}: {}\n", e.tick, e.source, e.description));
    }

    out.push_str("### COMMAND\n");
    match (&ctx.command, &ctx.intent_change) {
        (Some(c), _) => out.push_str(&format!("New command: {c}\n")),
        (None, Some(t)) => out.push_str(&format!("Intent change: {t}\nReplan the tasks not marked COMPLETED.\n")),
        (None, None) => out.push_str("Replan the tasks not marked COMPLETED.\n"),
    }
    out
}

fn role_label(r: ChatRole) -> &'static str {
    match r {
        ChatRole::User => "USER",
        ChatRole::TaskManager => "TASK_MANAGER",
        ChatRole::Event => "EVENT",
        ChatRole::Robot => "ROBOT",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManagedStep {
    assignment: Assignment,
    command: String,
    record: Option<RecordId>,
}

/// One line of the manager decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Plan {
        tick: u64,
        backend: String,
        context_hash: String,
        rules_hash: String,
        command: Option<String>,
        plan: Plan,
        #[serde(default)]
        exchanges: Vec<(String, String)>,
    },
    PlannerFailure { tick: u64, backend: String, detail: String },
    Route { tick: u64, text: String, route: HumanRoute },
    Dispatch { tick: u64, cycle: u64, record_id: RecordId, assignee: String, step_id: StepId, resumed: bool },
    Cancel { tick: u64, record_id: RecordId, assignee: String },
    Reassigned { tick: u64, record_id: RecordId, from: String, to: String, instruction: String },
    Dropped { tick: u64, record_id: RecordId, instruction: String },
    Stale { tick: u64, record_id: RecordId, epoch: u32, status: TaskStatus },
    Noop { tick: u64, reason: String },
}

/// Read-only view exported to the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagerSnapshot {
    pub records: Vec<TaskRecord>,
    pub robots: BTreeMap<RobotId, RobotStatus>,
    pub open_steps: Vec<OpenStep>,
    pub paused: bool,
}

pub struct TaskManager {
    config: ScenarioConfig,
    rules: StaticRules,
    planner: Box<dyn Planner>,
    records: BTreeMap<RecordId, TaskRecord>,
    epochs: BTreeMap<RecordId, u32>,
    /// Interrupted by a failure; waits for a replan instead of a retry.
    held: BTreeSet<RecordId>,
    steps: Vec<ManagedStep>,
    robots: BTreeMap<RobotId, RobotStatus>,
    active: BTreeMap<RobotId, RecordId>,
    history: ChatHistory,
    commands: Vec<String>,
    queued_commands: VecDeque<String>,
    pending_events: Vec<Event>,
    intent_change: Option<String>,
    help_pending: VecDeque<RecordId>,
    paused: bool,
    decisions: Vec<Decision>,
    plans: Vec<Plan>,
    next_record: RecordId,
    next_plan: u64,
    dispatch_cycle: u64,
    team_dirty: bool,
}

impl std::fmt::Debug for TaskManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskManager").field("records", &self.records.len()).field("steps", &self.steps.len()).finish()
    }
}

impl TaskManager {
    pub fn new(config: &ScenarioConfig, rules: StaticRules, planner: Box<dyn Planner>) -> Self {
        let robots = config
            .robots
            .iter()
            .map(|r| {
                (
                    r.id.clone(),
                    RobotStatus {
                        posture: Some(r.initial_pose.posture.clone()),
                        position: r.initial_pose.position,
                        busy: false,
                    },
                )
            })
            .collect();
        Self {
            config: config.clone(),
            rules,
            planner,
            records: BTreeMap::new(),
            epochs: BTreeMap::new(),
            held: BTreeSet::new(),
            steps: Vec::new(),
            robots,
            active: BTreeMap::new(),
            history: ChatHistory::new(),
            commands: Vec::new(),
            queued_commands: VecDeque::new(),
            pending_events: Vec::new(),
            intent_change: None,
            help_pending: VecDeque::new(),
            paused: false,
            decisions: Vec::new(),
            plans: Vec::new(),
            next_record: 1,
            next_plan: 1,
            dispatch_cycle: 0,
            team_dirty: false,
        }
    }

    pub fn history(&self) -> &ChatHistory {
        &self.history
    }

    pub fn records(&self) -> impl Iterator<Item = &TaskRecord> {
        self.records.values()
    }

    pub fn record(&self, id: RecordId) -> Option<&TaskRecord> {
        self.records.get(&id)
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    pub fn plans(&self) -> &[Plan] {
        &self.plans
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn help_pending(&self) -> bool {
        !self.help_pending.is_empty()
    }

    pub fn planner_id(&self) -> String {
        self.planner.id()
    }

    /// Robots with a dispatched, unfinished record.
    pub fn active_records(&self) -> &BTreeMap<RobotId, RecordId> {
        &self.active
    }

    /// No open steps, no queued input.
    pub fn is_idle(&self) -> bool {
        self.queued_commands.is_empty()
            && self.pending_events.is_empty()
            && self.intent_change.is_none()
            && self.steps.iter().all(|s| self.step_done(s))
    }

    pub fn snapshot(&self) -> ManagerSnapshot {
        ManagerSnapshot {
            records: self.records.values().cloned().collect(),
            robots: self.robots.clone(),
            open_steps: self.open_steps(),
            paused: self.paused,
        }
    }

    fn step_done(&self, s: &ManagedStep) -> bool {
        s.record.and_then(|r| self.records.get(&r)).is_some_and(|r| r.status == TaskStatus::Completed)
    }

    fn open_steps(&self) -> Vec<OpenStep> {
        self.steps
            .iter()
            .filter(|s| !self.step_done(s))
            .map(|s| {
                let rec = s.record.and_then(|r| self.records.get(&r));
                OpenStep {
                    assignment: s.assignment.clone(),
                    command: s.command.clone(),
                    status: rec.map(|r| r.status),
                    in_flight: rec.is_some_and(|r| r.status == TaskStatus::InProgress),
                }
            })
            .collect()
    }

    fn context(&self, tick: u64) -> DynamicContext {
        DynamicContext {
            tick,
            commands: self.commands.clone(),
            command: None,
            intent_change: self.intent_change.clone(),
            history: self.history.entries().to_vec(),
            robots: self.robots.clone(),
            records: self.records.values().cloned().collect(),
            open_steps: self.open_steps(),
            events: self.pending_events.clone(),
            humans: self.config.humans.clone(),
        }
    }

    /// Append an operator utterance as if it came over the bus.
    pub fn chat(&mut self, role: ChatRole, text: impl Into<String>, tick: u64) {
        self.history.push(role, text, tick);
    }

    fn transition(&mut self, id: RecordId, to: TaskStatus, tick: u64, reason: Option<String>) -> bool {
        let Some(r) = self.records.get_mut(&id) else { return false };
        r.transition(to, tick, reason).is_ok()
    }

    /// Process one tick's inbox and return outbound messages.
    pub fn cycle(&mut self, tick: u64, inbox: Vec<Envelope>) -> Vec<(String, Payload)> {
        let mut out = Vec::new();
        for env in inbox {
            self.apply(tick, env, &mut out);
        }
        if self.intent_change.is_some() || !self.pending_events.is_empty() {
            self.replan(tick, &mut out);
        }
        while let Some(cmd) = self.queued_commands.pop_front() {
            self.plan_command(tick, cmd);
        }
        if !self.paused {
            self.dispatch(tick, &mut out);
        }
        if self.team_dirty {
            self.team_dirty = false;
            let team: Vec<TeamStep> = self
                .open_steps()
                .into_iter()
                .map(|s| TeamStep { assignee: s.assignment.assignee, instruction: s.assignment.instruction })
                .collect();
            let plan_id = self.plans.last().map(|p| p.plan_id.clone()).unwrap_or_default();
            out.push((BROADCAST.into(), Payload::PlanPosted { plan_id, team }));
        }
        out
    }

    fn apply(&mut self, tick: u64, env: Envelope, out: &mut Vec<(String, Payload)>) {
        match env.payload {
            Payload::StatusUpdate { record_id, epoch, status, reason, robot } => {
                if self.config.robot(&env.sender).is_some() {
                    self.robots.insert(env.sender.clone(), robot);
                }
                let current = self.epochs.get(&record_id).copied();
                let live = self.records.get(&record_id).is_some_and(|r| !r.retired && r.status == TaskStatus::InProgress);
                if current != Some(epoch) || !live {
                    self.decisions.push(Decision::Stale { tick, record_id, epoch, status });
                    return;
                }
                if status == TaskStatus::InProgress || !self.transition(record_id, status, tick, reason.clone()) {
                    return;
                }
                if self.active.get(&env.sender) == Some(&record_id) {
                    self.active.remove(&env.sender);
                }
                let instr = self.records[&record_id].assignment.instruction.clone();
                match status {
                    TaskStatus::Completed => {
                        self.history.push(ChatRole::Robot, format!("{}: completed \"{instr}\"", env.sender), tick);
                        self.team_dirty = true;
                    }
                    _ => {
                        let reason = reason.unwrap_or_default();
                        // a busy rejection is retried by dispatch; failures wait for a replan
                        if !reason.starts_with("busy") {
                            self.held.insert(record_id);
                        }
                        self.history.push(
                            ChatRole::Robot,
                            format!("{}: interrupted \"{instr}\" ({reason})", env.sender),
                            tick,
                        );
                    }
                }
            }
            Payload::EventReport { event } => {
                self.history.push(ChatRole::Event, format!("{}: {}", event.source, event.description), tick);
                self.pending_events.push(event);
            }
            Payload::HumanInput { from, text } => self.human_input(tick, &from, &text, out),
            Payload::HelpDone { record_id } => self.help_done(tick, Some(record_id)),
            _ => {}
        }
    }

    fn human_input(&mut self, tick: u64, _from: &str, text: &str, _out: &mut Vec<(String, Payload)>) {
        self.history.push(ChatRole::User, text, tick);
        let route = self.planner.route_input(text, self.help_pending(), &self.commands);
        self.decisions.push(Decision::Route { tick, text: text.to_string(), route: route.clone() });
        match route {
            HumanRoute::NewCommand(c) => self.queued_commands.push_back(c),
            HumanRoute::IntentChange => self.intent_change = Some(text.to_string()),
            HumanRoute::HelpDone => self.help_done(tick, None),
            HumanRoute::Information => {}
        }
    }

    fn help_done(&mut self, tick: u64, record: Option<RecordId>) {
        let id = match record {
            Some(r) => {
                self.help_pending.retain(|x| *x != r);
                r
            }
            None => match self.help_pending.pop_front() {
                Some(r) => r,
                None => return,
            },
        };
        let live = self.records.get(&id).is_some_and(|r| r.status == TaskStatus::InProgress && !r.retired);
        if live && self.transition(id, TaskStatus::Completed, tick, Some("confirmed by human".into())) {
            self.team_dirty = true;
        }
    }

    fn plan_summary(plan: &Plan) -> String {
        let classes: Vec<String> = plan.classes.iter().map(|c| c.to_string()).collect();
        let steps: Vec<String> = plan
            .steps
            .iter()
            .map(|s| {
                let mut t = format!("{} {}: {}", s.step_id, s.assignee, s.instruction);
                if !s.depends_on.is_empty() {
                    t.push_str(&format!(" (after {})", s.depends_on.iter().cloned().collect::<Vec<_>>().join(", ")));
                }
                if let Some(g) = &s.sync_group {
                    t.push_str(&format!(" [sync {g}]"));
                }
                t
            })
            .collect();
        format!("Plan {} [{}]: {}", plan.plan_id, classes.join(", "), steps.join("; "))
    }

    fn new_plan_id(&mut self) -> String {
        let id = format!("p{}", self.next_plan);
        self.next_plan += 1;
        id
    }

    fn busy_robots(&self) -> BTreeSet<RobotId> {
        self.open_steps().into_iter().map(|s| s.assignment.assignee).collect()
    }

    fn request_plan(&mut self, tick: u64, command: Option<String>) -> Option<Plan> {
        let plan_id = self.new_plan_id();
        let mut ctx = self.context(tick);
        ctx.command = command.clone();
        let prompt = assemble_context(&self.rules, &ctx, &self.config);
        let req = PlanRequest { plan_id, prompt: prompt.clone(), context: &ctx, command: command.clone(), busy: self.busy_robots() };
        let result = self.planner.plan(&req);
        let exchanges = self.planner.take_transcript();
        match result {
            Ok(plan) => {
                self.decisions.push(Decision::Plan {
                    tick,
                    backend: self.planner.id(),
                    context_hash: hex::encode(Sha256::digest(prompt.as_bytes())),
                    rules_hash: self.rules.hash(),
                    command,
                    plan: plan.clone(),
                    exchanges,
                });
                self.paused = false;
                self.plans.push(plan.clone());
                Some(plan)
            }
            Err(e) => {
                self.decisions.push(Decision::PlannerFailure { tick, backend: self.planner.id(), detail: e.to_string() });
                self.history.push(ChatRole::TaskManager, e.to_string(), tick);
                self.paused = true;
                None
            }
        }
    }

    fn namespaced(plan: &Plan, command: &str) -> Vec<ManagedStep> {
        let ns = |s: &str| format!("{}/{s}", plan.plan_id);
        plan.steps
            .iter()
            .map(|s| {
                let mut a = s.clone();
                a.step_id = ns(&s.step_id);
                a.depends_on = s.depends_on.iter().map(|d| ns(d)).collect();
                a.sync_group = s.sync_group.as_ref().map(|g| ns(g));
                ManagedStep { assignment: a, command: command.to_string(), record: None }
            })
            .collect()
    }

    fn plan_command(&mut self, tick: u64, command: String) {
        self.commands.push(command.clone());
        let Some(plan) = self.request_plan(tick, Some(command.clone())) else { return };
        self.history.push(ChatRole::TaskManager, Self::plan_summary(&plan), tick);
        if plan.is_infeasible() {
            self.history.push(
                ChatRole::TaskManager,
                format!("\"{command}\" is beyond the team's capabilities (INFEASIBLE)"),
                tick,
            );
        }
        self.steps.extend(Self::namespaced(&plan, &command));
        self.team_dirty = true;
    }

    fn cancel(&mut self, tick: u64, id: RecordId, reason: &str, out: &mut Vec<(String, Payload)>) {
        let Some(rec) = self.records.get(&id) else { return };
        if rec.status != TaskStatus::InProgress {
            return;
        }
        let owner = rec.owner.clone();
        let epoch = self.epochs.get(&id).copied().unwrap_or(0);
        self.transition(id, TaskStatus::Interrupted, tick, Some(reason.into()));
        if self.config.robot(&owner).is_some() {
            out.push((owner.clone(), Payload::CancelTask { record_id: id, epoch }));
            if self.active.get(&owner) == Some(&id) {
                self.active.remove(&owner);
            }
        }
        self.help_pending.retain(|x| *x != id);
        self.epochs.insert(id, epoch + 1);
        self.decisions.push(Decision::Cancel { tick, record_id: id, assignee: owner });
    }

    fn replan(&mut self, tick: u64, out: &mut Vec<(String, Payload)>) {
        let had_open = !self.open_steps().is_empty();
        let intent = self.intent_change.clone();
        if !had_open && intent.is_none() {
            self.pending_events.clear();
            self.decisions.push(Decision::Noop { tick, reason: "event with no open tasks".into() });
            return;
        }
        let Some(plan) = self.request_plan(tick, None) else {
            // the triggers stay queued and are folded into the next attempt
            return;
        };
        self.pending_events.clear();
        self.intent_change = None;
        self.history.push(ChatRole::TaskManager, Self::plan_summary(&plan), tick);
        let command = intent.or_else(|| self.commands.last().cloned()).unwrap_or_default();
        let mut fresh = Self::namespaced(&plan, &command);

        // keep the originating command of steps that survive
        let old: Vec<ManagedStep> = self.steps.drain(..).collect();
        let old_records: Vec<RecordId> = old
            .iter()
            .filter_map(|s| s.record)
            .filter(|r| self.records.get(r).is_some_and(|x| x.status != TaskStatus::Completed && !x.retired))
            .collect();
        let mut bound: BTreeSet<usize> = BTreeSet::new();
        for rid in old_records {
            let rec = self.records[&rid].clone();
            let key = canonical_step(&rec.assignment.instruction);
            let slot = fresh.iter().enumerate().position(|(i, s)| {
                !bound.contains(&i)
                    && s.record.is_none()
                    && s.assignment.assignee == rec.owner
                    && canonical_step(&s.assignment.instruction) == key
            });
            match slot {
                Some(i) => {
                    bound.insert(i);
                    if let Some(o) = old.iter().find(|o| o.record == Some(rid)) {
                        fresh[i].command = o.command.clone();
                    }
                    fresh[i].record = Some(rid);
                    self.held.remove(&rid);
                    if rec.status == TaskStatus::InProgress && !fresh[i].assignment.depends_on.is_empty() {
                        self.cancel(tick, rid, "superseded by replan", out);
                    }
                }
                None => {
                    self.cancel(tick, rid, "superseded by replan", out);
                    if let Some(r) = self.records.get_mut(&rid) {
                        r.retired = true;
                    }
                    self.held.remove(&rid);
                    self.help_pending.retain(|x| *x != rid);
                    let other = fresh.iter().find(|s| canonical_step(&s.assignment.instruction) == key);
                    match other {
                        Some(s) => self.decisions.push(Decision::Reassigned {
                            tick,
                            record_id: rid,
                            from: rec.owner.clone(),
                            to: s.assignment.assignee.clone(),
                            instruction: rec.assignment.instruction.clone(),
                        }),
                        None => self.decisions.push(Decision::Dropped {
                            tick,
                            record_id: rid,
                            instruction: rec.assignment.instruction.clone(),
                        }),
                    }
                }
            }
        }
        for s in fresh.iter_mut().filter(|s| s.record.is_none()) {
            if let Some(o) = old.iter().find(|o| {
                o.assignment.assignee == s.assignment.assignee
                    && canonical_step(&o.assignment.instruction) == canonical_step(&s.assignment.instruction)
            }) {
                s.command = o.command.clone();
            }
        }
        self.steps = fresh;
        self.team_dirty = true;
    }

    fn deps_done(&self, s: &ManagedStep) -> bool {
        s.assignment.depends_on.iter().all(|d| match self.steps.iter().find(|x| &x.assignment.step_id == d) {
            Some(x) => self.step_done(x),
            None => true,
        })
    }

    fn ready(&self, s: &ManagedStep) -> bool {
        let waiting = match s.record.and_then(|r| self.records.get(&r)) {
            None => true,
            Some(r) => r.status == TaskStatus::Interrupted && !r.retired && !self.held.contains(&r.record_id),
        };
        waiting && self.deps_done(s)
    }

    fn dispatch(&mut self, tick: u64, out: &mut Vec<(String, Payload)>) {
        self.dispatch_cycle += 1;
        let cycle = self.dispatch_cycle;
        let mut taken: BTreeSet<RobotId> = self.active.keys().cloned().collect();
        let mut released_groups: BTreeSet<String> = BTreeSet::new();
        for i in 0..self.steps.len() {
            let step = self.steps[i].clone();
            if !self.ready(&step) {
                continue;
            }
            let assignee = step.assignment.assignee.clone();
            if self.config.is_human(&assignee) {
                if step.record.is_none() {
                    let id = self.open_record(i, tick);
                    self.help_pending.push_back(id);
                    self.history.push(
                        ChatRole::TaskManager,
                        format!("Help needed: {assignee}, please {}. Reply \"done\" when finished.", step.assignment.instruction),
                        tick,
                    );
                    out.push((
                        assignee.clone(),
                        Payload::HelpRequest { record_id: id, human: assignee, instruction: step.assignment.instruction },
                    ));
                    self.team_dirty = true;
                }
                continue;
            }
            if let Some(g) = step.assignment.sync_group.clone() {
                if released_groups.contains(&g) {
                    continue;
                }
                let members: Vec<usize> = (0..self.steps.len())
                    .filter(|&j| self.steps[j].assignment.sync_group.as_deref() == Some(g.as_str()))
                    .collect();
                let all_ready = members.iter().all(|&j| {
                    let m = &self.steps[j];
                    self.ready(m) && !taken.contains(&m.assignment.assignee)
                });
                if !all_ready {
                    continue;
                }
                released_groups.insert(g);
                let peers: Vec<RobotId> = members.iter().map(|&j| self.steps[j].assignment.assignee.clone()).collect();
                for j in members {
                    taken.insert(self.steps[j].assignment.assignee.clone());
                    self.send_assign(j, tick, cycle, peers.clone(), out);
                }
                continue;
            }
            if taken.contains(&assignee) {
                continue;
            }
            taken.insert(assignee);
            self.send_assign(i, tick, cycle, Vec::new(), out);
        }
    }

    fn open_record(&mut self, i: usize, tick: u64) -> RecordId {
        let id = self.next_record;
        self.next_record += 1;
        let rec = TaskRecord::new(id, self.steps[i].assignment.clone(), tick);
        self.records.insert(id, rec);
        self.epochs.insert(id, 0);
        self.steps[i].record = Some(id);
        id
    }

    fn send_assign(&mut self, i: usize, tick: u64, cycle: u64, peers: Vec<RobotId>, out: &mut Vec<(String, Payload)>) {
        let (id, resumed) = match self.steps[i].record {
            Some(r) => {
                self.transition(r, TaskStatus::InProgress, tick, Some("resumed".into()));
                let e = self.epochs.entry(r).or_insert(0);
                *e += 1;
                (r, true)
            }
            None => (self.open_record(i, tick), false),
        };
        let a = self.steps[i].assignment.clone();
        self.active.insert(a.assignee.clone(), id);
        self.decisions.push(Decision::Dispatch {
            tick,
            cycle,
            record_id: id,
            assignee: a.assignee.clone(),
            step_id: a.step_id.clone(),
            resumed,
        });
        out.push((
            a.assignee.clone(),
            Payload::AssignTask {
                record_id: id,
                epoch: self.epochs[&id],
                step_id: a.step_id,
                instruction: a.instruction,
                sync_peers: peers.into_iter().filter(|p| p != &a.assignee).collect(),
            },
        ));
    }
}
