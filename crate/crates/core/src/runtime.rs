//! Single-process run loop wiring the manager, the agents, the scripted human
//! and the world through one bus.
//!
//! Tick `t`: the manager consumes its inbox and dispatches (stamped `t`),
//! agents consume theirs and submit skills, the world steps to `t+1`, then
//! skill outcomes, utterances, human actions and sensor reports are posted
//! stamped `t+1`.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{AgentOutput, RobotAgent};
use crate::bus::{Bus, Envelope, Payload, GATEWAY, MANAGER};
use crate::domain::{validate_scenario, RecordId, RobotId, ScenarioConfig, TaskRecord, TaskStatus, Violation};
use crate::error::{CoreError, Result};
use crate::gateway::{Frame, FrameType, Snapshot};
use crate::language::{parse_intent, Intent, Referent, Resolver};
use crate::manager::{StaticRules, TaskManager};
use crate::planner::{Planner, RuleBackend};
use crate::rules::ScenarioTable;
use crate::world::{goal_satisfied, EventScript, Predicate, Target, WorldCommand, WorldParams, WorldState};

/// Ticks without traffic after which a run with open work counts as stalled.
pub const IDLE_GRACE: u64 = 50;

fn default_budget() -> u64 {
    600
}

fn default_true() -> bool {
    true
}

fn default_delay() -> u64 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanSimConfig {
    /// Perform requested help and answer "done" without operator input.
    #[serde(default = "default_true")]
    pub auto_help: bool,
    /// Ticks between a help request and the answer.
    #[serde(default = "default_delay")]
    pub delay: u64,
}

impl Default for HumanSimConfig {
    fn default() -> Self {
        Self { auto_help: true, delay: default_delay() }
    }
}

/// Everything needed to replay one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(flatten)]
    pub config: ScenarioConfig,
    #[serde(default)]
    pub world: WorldParams,
    /// Scripted disturbances and utterances; commands are utterances too.
    #[serde(default)]
    pub script: EventScript,
    #[serde(default)]
    pub planning: ScenarioTable,
    #[serde(default)]
    pub goals: Vec<Predicate>,
    #[serde(default = "default_budget")]
    pub tick_budget: u64,
    #[serde(default)]
    pub human: HumanSimConfig,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// All violations; empty means the scenario may run.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = validate_scenario(&self.config);
        if !self.script.is_valid() {
            out.push(Violation::new("script", "trigger ticks must be nondecreasing"));
        }
        if self.tick_budget == 0 {
            out.push(Violation::new("tick_budget", "must be positive"));
        }
        if !(self.world.capture_radius >= 0.0 && self.world.formation_radius >= 0.0 && self.world.pose_noise >= 0.0) {
            out.push(Violation::new("world", "radii and noise must be nonnegative"));
        }
        let regexes = self
            .planning
            .recipes
            .iter()
            .map(|r| ("planning.recipes", &r.when))
            .chain(self.planning.event_recipes.iter().filter_map(|r| r.entity.as_ref().map(|e| ("planning.event_recipes", e))));
        for (field, re) in regexes {
            if let Err(e) = regex::Regex::new(re) {
                out.push(Violation::new(field, format!("bad pattern {re:?}: {e}")));
            }
        }
        let world = WorldState::new(&self.config, self.world.clone());
        for (i, g) in self.goals.iter().enumerate() {
            let known = |id: &str| world.entities.contains_key(id);
            let ok = match g {
                Predicate::At { entity, target, .. } => known(entity) && world.resolve(target).is_some(),
                Predicate::Attached { child, parent } => known(child) && known(parent),
                Predicate::Posture { robot, .. } => self.config.robot(robot).is_some(),
            };
            if !ok {
                out.push(Violation::new(format!("goals[{i}]"), "references an unknown entity or location"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunOutcome {
    Completed,
    GoalsUnmet,
    BudgetExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalResult {
    pub goal: Predicate,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub backend: String,
    pub outcome: RunOutcome,
    pub ticks: u64,
    pub goals: Vec<GoalResult>,
    pub bus_log_hash: String,
    pub world_digest: String,
    pub envelopes: usize,
    pub plans: usize,
    pub records: Vec<TaskRecord>,
    pub wall_ms: u64,
}

impl RunReport {
    pub fn goals_met(&self) -> bool {
        self.goals.iter().all(|g| g.holds)
    }
}

/// Adversarial delivery: holds back and reorders messages across senders
/// while keeping each sender's order, and re-sends some envelopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interleaving {
    pub seed: u64,
    /// Chance that a sender's remaining queue is held back one more tick.
    pub hold_prob: f64,
    /// Chance that an accepted envelope is sent a second time.
    pub dup_prob: f64,
}

/// One message handed to an actor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub tick: u64,
    pub recipient: String,
    pub sender: String,
    pub msg_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub tick: u64,
    pub robots: BTreeMap<RobotId, RobotPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotPoint {
    pub x: f64,
    pub y: f64,
    pub posture: Option<String>,
    pub skill: Option<String>,
}

#[derive(Debug)]
struct HelpJob {
    due: u64,
    human: String,
    record_id: RecordId,
    instruction: String,
}

#[derive(Debug, Default)]
struct HumanSim {
    config: HumanSimConfig,
    jobs: Vec<HelpJob>,
}

impl HumanSim {
    fn receive(&mut self, env: &Envelope, tick: u64) {
        if let Payload::HelpRequest { record_id, human, instruction } = &env.payload {
            if self.config.auto_help {
                self.jobs.push(HelpJob {
                    due: tick + self.config.delay,
                    human: human.clone(),
                    record_id: *record_id,
                    instruction: instruction.clone(),
                });
            }
        }
    }

    /// Perform due help; returns the humans that finished.
    fn act(&mut self, world: &mut WorldState, resolver: &Resolver) -> Vec<(String, RecordId)> {
        let (due, rest): (Vec<HelpJob>, Vec<HelpJob>) =
            std::mem::take(&mut self.jobs).into_iter().partition(|j| j.due <= world.tick);
        self.jobs = rest;
        let mut done = Vec::new();
        for j in due {
            match perform_help(&j.instruction, world, resolver) {
                Ok(()) => done.push((j.human, j.record_id)),
                Err(e) => tracing::warn!(human = %j.human, instruction = %j.instruction, error = %e, "scripted help failed"),
            }
        }
        done
    }
}

fn referent_target(r: Referent) -> Option<Target> {
    match r {
        Referent::Coord(p) => Some(Target::coord(p)),
        other => other.id().map(Target::named),
    }
}

/// Physical effect of a human help step.
fn perform_help(instruction: &str, world: &mut WorldState, resolver: &Resolver) -> std::result::Result<(), String> {
    let (object, target) = match parse_intent(instruction) {
        Some(Intent::Place { object, target })
        | Some(Intent::PickPlace { object, target })
        | Some(Intent::Push { object, target })
        | Some(Intent::Carry { object, target })
        | Some(Intent::Deliver { object, target }) => (object, target),
        _ => return Err(format!("no physical effect for {instruction:?}")),
    };
    let obj = resolver.resolve(&object).and_then(|r| r.id().map(str::to_string)).ok_or("unknown object")?;
    let target = resolver.resolve(&target).and_then(referent_target).ok_or("unknown target")?;
    world.human_place(&obj, &target)
}

pub struct Runtime {
    scenario: Scenario,
    world: WorldState,
    bus: Bus,
    manager: TaskManager,
    agents: BTreeMap<RobotId, RobotAgent>,
    resolver: Resolver,
    human: HumanSim,
    interleave: Option<(Interleaving, ChaCha8Rng)>,
    holding: BTreeMap<String, VecDeque<Envelope>>,
    deliveries: Vec<Delivery>,
    trajectory: Vec<TrajectoryRow>,
    frames: Vec<Frame>,
    chat_seen: usize,
    last_tasks: Vec<TaskRecord>,
    inputs: Vec<String>,
    last_activity: u64,
    outcome: Option<RunOutcome>,
    live: bool,
    started: Instant,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime").field("scenario", &self.scenario.config.name).field("tick", &self.world.tick).finish()
    }
}

impl Runtime {
    pub fn new(scenario: Scenario, planner: Box<dyn Planner>, rules: StaticRules) -> Result<Self> {
        let violations = scenario.validate();
        if !violations.is_empty() {
            return Err(CoreError::InvalidScenario(violations));
        }
        let world = WorldState::new(&scenario.config, scenario.world.clone());
        let mut bus = Bus::new();
        bus.register(MANAGER);
        bus.register(GATEWAY);
        let agents: BTreeMap<RobotId, RobotAgent> = scenario
            .config
            .robots
            .iter()
            .map(|r| (r.id.clone(), RobotAgent::new(r.clone(), &scenario.config)))
            .collect();
        for id in agents.keys() {
            bus.register(id.clone());
        }
        for h in &scenario.config.humans {
            bus.register(h.clone());
        }
        let manager = TaskManager::new(&scenario.config, rules, planner);
        Ok(Self {
            resolver: Resolver::new(&scenario.config),
            human: HumanSim { config: scenario.human.clone(), jobs: Vec::new() },
            scenario,
            world,
            bus,
            manager,
            agents,
            interleave: None,
            holding: BTreeMap::new(),
            deliveries: Vec::new(),
            trajectory: Vec::new(),
            frames: Vec::new(),
            chat_seen: 0,
            last_tasks: Vec::new(),
            inputs: Vec::new(),
            last_activity: 0,
            outcome: None,
            live: false,
            started: Instant::now(),
        })
    }

    /// Rule planner, default static rules.
    pub fn with_rules(scenario: Scenario) -> Result<Self> {
        let planner = Box::new(RuleBackend::new(&scenario.config, &scenario.planning));
        Self::new(scenario, planner, StaticRules::default())
    }

    pub fn with_interleaving(mut self, i: Interleaving) -> Self {
        self.interleave = Some((i, ChaCha8Rng::seed_from_u64(i.seed)));
        self
    }

    /// Replace a robot's composer and classifier with a language model.
    pub fn set_agent_model(&mut self, robot: &str, model: Box<dyn crate::planner::ChatModel>) {
        if let Some(a) = self.agents.remove(robot) {
            self.agents.insert(robot.to_string(), a.with_model(model));
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn manager(&self) -> &TaskManager {
        &self.manager
    }

    pub fn agents(&self) -> &BTreeMap<RobotId, RobotAgent> {
        &self.agents
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    pub fn trajectory(&self) -> &[TrajectoryRow] {
        &self.trajectory
    }

    pub fn outcome(&self) -> Option<RunOutcome> {
        self.outcome
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    /// Operator text from the gateway, delivered at the next tick.
    pub fn inject_user(&mut self, text: impl Into<String>) {
        self.inputs.push(text.into());
    }

    /// Live runs emit gateway frames and never finish on their own, so input
    /// is accepted at any tick. Headless runs buffer no frames.
    pub fn set_live(&mut self, live: bool) {
        self.live = live;
    }

    /// Frames produced since the last call.
    pub fn take_frames(&mut self) -> Vec<Frame> {
        std::mem::take(&mut self.frames)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            tick: self.world.tick,
            world: self.world.snapshot(),
            manager: self.manager.snapshot(),
            chat: self.manager.history().entries().to_vec(),
            finished: self.is_finished(),
        }
    }

    fn post(&mut self, sender: &str, recipient: &str, tick: u64, payload: Payload) {
        let msg_id = self.bus.next_msg_id(sender);
        let env = Envelope { msg_id, sender: sender.into(), recipient: recipient.into(), tick, payload };
        let dup = match &mut self.interleave {
            Some((i, rng)) => rng.gen_bool(i.dup_prob),
            None => false,
        };
        match self.bus.send(env.clone()) {
            Ok(_) => {
                self.last_activity = tick;
                if dup {
                    let _ = self.bus.send(env);
                }
            }
            Err(e) => tracing::warn!(sender, recipient, error = %e, "envelope rejected"),
        }
    }

    fn post_all(&mut self, sender: &str, tick: u64, msgs: Vec<(String, Payload)>) {
        for (to, p) in msgs {
            self.post(sender, &to, tick, p);
        }
    }

    /// Hand an actor its inbox, through the interleaver when one is set.
    fn deliver(&mut self, recipient: &str) -> Vec<Envelope> {
        let fresh = self.bus.drain(recipient);
        let out = match &mut self.interleave {
            None => fresh,
            Some((i, rng)) => {
                let held = self.holding.entry(recipient.to_string()).or_default();
                held.extend(fresh);
                let mut queues: BTreeMap<String, VecDeque<Envelope>> = BTreeMap::new();
                for e in held.drain(..) {
                    queues.entry(e.sender.clone()).or_default().push_back(e);
                }
                let mut ready: Vec<VecDeque<Envelope>> = Vec::new();
                for (_, mut q) in queues {
                    let take = if rng.gen_bool(i.hold_prob) { rng.gen_range(0..=q.len()) } else { q.len() };
                    let rest = q.split_off(take);
                    held.extend(rest);
                    ready.push(q);
                }
                // random merge that keeps each sender's order
                let mut out = Vec::new();
                loop {
                    let live: Vec<usize> = (0..ready.len()).filter(|&k| !ready[k].is_empty()).collect();
                    if live.is_empty() {
                        break;
                    }
                    let k = live[rng.gen_range(0..live.len())];
                    out.push(ready[k].pop_front().expect("nonempty"));
                }
                out
            }
        };
        let tick = self.world.tick;
        self.deliveries.extend(out.iter().map(|e| Delivery {
            tick,
            recipient: recipient.to_string(),
            sender: e.sender.clone(),
            msg_id: e.msg_id,
        }));
        out
    }

    fn in_transit(&self) -> bool {
        self.bus.endpoints().any(|e| self.bus.pending(e) > 0) || self.holding.values().any(|q| !q.is_empty())
    }

    /// Advance one tick. Does nothing once finished.
    pub fn step(&mut self) {
        if self.outcome.is_some() {
            return;
        }
        let t = self.world.tick;
        for text in std::mem::take(&mut self.inputs) {
            self.post(GATEWAY, MANAGER, t, Payload::HumanInput { from: "user".into(), text });
        }

        let inbox = self.deliver(MANAGER);
        let out = self.manager.cycle(t, inbox);
        self.post_all(MANAGER, t, out);

        let ids: Vec<RobotId> = self.agents.keys().cloned().collect();
        let mut commands: Vec<(RobotId, WorldCommand)> = Vec::new();
        for id in &ids {
            let inbox = self.deliver(id);
            let mut out = AgentOutput::default();
            let agent = self.agents.get_mut(id).expect("registered");
            for env in &inbox {
                agent.handle(env, &self.world, &mut out);
            }
            agent.next_command(&mut out);
            commands.extend(out.commands.into_iter().map(|c| (id.clone(), c)));
            self.post_all(id, t, out.messages);
        }
        self.deliver(GATEWAY);
        for h in self.scenario.config.humans.clone() {
            for env in self.deliver(&h) {
                self.human.receive(&env, t);
            }
        }

        let report = self.world.step(&commands, &self.scenario.script);
        let t1 = self.world.tick;
        for outcome in &report.outcomes {
            let mut out = AgentOutput::default();
            if let Some(agent) = self.agents.get_mut(&outcome.robot) {
                agent.on_outcome(outcome, &self.world, &mut out);
                self.post_all(&outcome.robot.clone(), t1, out.messages);
            }
        }
        for (from, text) in report.utterances {
            let sender = if self.scenario.config.is_human(&from) { from.clone() } else { GATEWAY.to_string() };
            self.post(&sender, MANAGER, t1, Payload::HumanInput { from, text });
        }
        for (human, _record) in self.human.act(&mut self.world, &self.resolver) {
            let sender = if self.scenario.config.is_human(&human) { human.clone() } else { GATEWAY.to_string() };
            self.post(&sender, MANAGER, t1, Payload::HumanInput { from: human, text: "done".into() });
        }
        for id in &ids {
            let mut out = AgentOutput::default();
            self.agents.get_mut(id).expect("registered").sense(&self.world, &mut out);
            self.post_all(id, t1, out.messages);
        }

        self.record_tick();
        self.check_finished();
    }

    fn record_tick(&mut self) {
        let t = self.world.tick;
        let robots = self
            .agents
            .keys()
            .map(|id| {
                let p = self.world.position(id).unwrap_or_default();
                let point = RobotPoint {
                    x: p.x,
                    y: p.y,
                    posture: self.world.posture(id).map(str::to_string),
                    skill: self.world.active_skill(id).map(|s| s.to_string()),
                };
                (id.clone(), point)
            })
            .collect();
        self.trajectory.push(TrajectoryRow { tick: t, robots });
        if !self.live {
            return;
        }

        let entries = self.manager.history().entries();
        for e in &entries[self.chat_seen..] {
            self.frames.push(Frame::chat(e));
        }
        self.chat_seen = entries.len();
        let tasks: Vec<TaskRecord> = self.manager.records().cloned().collect();
        if tasks != self.last_tasks {
            self.frames.push(Frame::tasks(&tasks, t));
            self.last_tasks = tasks;
        }
        self.frames.push(Frame::new(FrameType::World, self.world.snapshot(), t));
    }

    fn check_finished(&mut self) {
        if self.live {
            return;
        }
        let t = self.world.tick;
        let script_done = t >= self.scenario.script.last_tick();
        let agents_idle = self.agents.values().all(|a| !a.is_busy());
        let quiet = script_done
            && agents_idle
            && self.human.jobs.is_empty()
            && self.inputs.is_empty()
            && !self.in_transit()
            && self.manager.is_idle()
            && !self.manager.help_pending();
        let goals_met = goal_satisfied(&self.world, &self.scenario.goals);
        let outcome = if quiet {
            Some(if goals_met { RunOutcome::Completed } else { RunOutcome::GoalsUnmet })
        } else if script_done && agents_idle && t.saturating_sub(self.last_activity) >= IDLE_GRACE {
            Some(RunOutcome::GoalsUnmet)
        } else if t >= self.scenario.tick_budget {
            Some(RunOutcome::BudgetExceeded)
        } else {
            None
        };
        if let Some(o) = outcome {
            self.outcome = Some(o);
            let report = self.report();
            self.frames.push(Frame::new(FrameType::Done, &report, t));
        }
    }

    /// Step until finished.
    pub fn run(&mut self) -> RunReport {
        while self.outcome.is_none() {
            self.step();
        }
        self.report()
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            scenario: self.scenario.config.name.clone(),
            backend: self.manager.planner_id(),
            outcome: self.outcome.unwrap_or(RunOutcome::BudgetExceeded),
            ticks: self.world.tick,
            goals: self
                .scenario
                .goals
                .iter()
                .map(|g| GoalResult { goal: g.clone(), holds: g.holds(&self.world) })
                .collect(),
            bus_log_hash: self.bus.log_hash(),
            world_digest: self.world.digest(),
            envelopes: self.bus.log().len(),
            plans: self.manager.plans().len(),
            records: self.manager.records().cloned().collect(),
            wall_ms: self.started.elapsed().as_millis() as u64,
        }
    }

    /// Manager and agent decisions merged by tick; manager first within a
    /// tick.
    pub fn decision_log(&self) -> Vec<Value> {
        let mut rows: Vec<(u64, u8, Value)> = Vec::new();
        let tick_of = |v: &Value| v.get("tick").and_then(Value::as_u64).unwrap_or(0);
        for d in self.manager.decisions() {
            let mut v = serde_json::to_value(d).expect("decision serializes");
            v["actor"] = Value::from(MANAGER);
            rows.push((tick_of(&v), 0, v));
        }
        for (id, a) in &self.agents {
            for d in a.decisions() {
                let mut v = serde_json::to_value(d).expect("decision serializes");
                v["actor"] = Value::from(id.as_str());
                rows.push((tick_of(&v), 1, v));
            }
        }
        rows.sort_by_key(|(t, k, _)| (*t, *k));
        rows.into_iter().map(|(_, _, v)| v).collect()
    }

    /// Write bus, trajectory, decision and chat logs plus the report.
    pub fn write_logs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("bus.jsonl"), self.bus.log_jsonl())?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("trajectory.jsonl"))?);
        for row in &self.trajectory {
            serde_json::to_writer(&mut f, row)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("decisions.jsonl"))?);
        for row in self.decision_log() {
            serde_json::to_writer(&mut f, &row)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        std::fs::write(dir.join("chat.json"), self.manager.history().to_json())?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report())?)?;
        Ok(())
    }
}

/// Statuses any record went through, for invariant checks.
pub fn completed_then_changed(records: &[TaskRecord]) -> Vec<RecordId> {
    records
        .iter()
        .filter(|r| {
            r.history
                .iter()
                .position(|h| h.to == TaskStatus::Completed)
                .is_some_and(|i| i + 1 < r.history.len())
        })
        .map(|r| r.record_id)
        .collect()
}
