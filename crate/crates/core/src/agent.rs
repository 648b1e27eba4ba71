//! Per-robot brain: composes a skill program for an instruction, runs it one
//! skill at a time, and filters what its camera sees down to relevant events.

use serde::{Deserialize, Serialize};

use crate::bus::{Envelope, Payload, TeamStep, MANAGER};
use crate::domain::{
    Event, Observation, RecordId, Relevance, RobotId, RobotSpec, RobotStatus, ScenarioConfig, TaskStatus,
};
use crate::language::{canonical_step, mentions_entity, parse_intent, Intent, Referent, Resolver};
use crate::planner::ChatModel;
use crate::world::{observe, ObserverCursor, SkillCall, SkillKind, SkillOutcome, SkillResult, Target, WorldCommand, WorldState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillLibraryEntry {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub params: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Composer {
    Rule,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillProgram {
    pub steps: Vec<SkillCall>,
    pub instruction: String,
    pub composer: Composer,
}

/// Entries for every skill the world knows, used when a scenario omits the
/// library.
pub fn default_library(spec: &RobotSpec) -> Vec<SkillLibraryEntry> {
    let entry = |k: SkillKind, d: &str, p: &[&str]| SkillLibraryEntry {
        name: k.name().into(),
        description: d.into(),
        params: p.iter().map(|s| s.to_string()).collect(),
    };
    let mut lib = Vec::new();
    if spec.has("navigate") || spec.has("fly") {
        lib.push(entry(SkillKind::MoveTo, "drive in a straight line to a coordinate or named entity", &["target"]));
    }
    if spec.has("camera") {
        lib.push(entry(SkillKind::Find, "locate an object with the camera", &["object"]));
    }
    if spec.has("navigate") {
        lib.push(entry(SkillKind::Reach, "move up to an object", &["object"]));
    }
    if spec.has("pick") {
        lib.push(entry(SkillKind::Pick, "grasp an object within reach", &["object"]));
    }
    if spec.has("place") {
        lib.push(entry(SkillKind::Place, "release the held object onto a target", &["object", "target"]));
    }
    if spec.has("sit") {
        lib.push(entry(SkillKind::Sit, "lower the body", &[]));
        lib.push(entry(SkillKind::Stand, "raise the body", &[]));
    }
    if spec.has("push") {
        lib.push(entry(SkillKind::Push, "push an object toward a target", &["object", "target"]));
    }
    if spec.has("formation_carry") {
        lib.push(entry(SkillKind::FormCarry, "move an object rigidly with the formation group", &["object", "target"]));
    }
    if spec.has("survey") {
        lib.push(entry(SkillKind::Survey, "sweep a region in a lawnmower pattern", &["region"]));
    }
    lib
}

fn library(spec: &RobotSpec) -> Vec<SkillLibraryEntry> {
    if spec.skills.is_empty() {
        default_library(spec)
    } else {
        spec.skills.clone()
    }
}

fn in_library(lib: &[SkillLibraryEntry], kind: SkillKind) -> bool {
    lib.iter().any(|e| e.name == kind.name())
}

/// Resolves an instruction phrase to a world target.
fn target_of(phrase: &str, resolver: &Resolver, world: &WorldState) -> Option<Target> {
    match resolver.resolve(phrase) {
        Some(Referent::Coord(v)) => Some(Target::coord(v)),
        Some(r) => r.id().map(Target::named),
        None => {
            let id = canonical_step(phrase).replace(' ', "_");
            world.entities.contains_key(&id).then(|| Target::named(id))
        }
    }
}

/// True when `phrase` is the plural of some entity's alias.
fn names_a_class(phrase: &str, world: &WorldState) -> bool {
    let canon = canonical_step(phrase);
    let Some(stem) = canon.strip_suffix('s') else { return false };
    world.entities.values().any(|e| e.aliases.iter().any(|a| canonical_step(a) == stem))
}

fn entity_of(phrase: &str, resolver: &Resolver, world: &WorldState) -> Option<String> {
    match target_of(phrase, resolver, world)? {
        Target::Named(n) if world.entities.contains_key(&n) => Some(n),
        _ => None,
    }
}

/// Deterministic instruction → program mapping.
pub fn compose_rule(
    instruction: &str,
    spec: &RobotSpec,
    resolver: &Resolver,
    world: &WorldState,
    peers: &[RobotId],
) -> Result<SkillProgram, String> {
    if instruction.trim().is_empty() {
        return Err("empty instruction".into());
    }
    let intent = parse_intent(instruction).ok_or_else(|| format!("no skill pattern matches \"{instruction}\""))?;
    let lib = library(spec);
    let obj = |p: &str| entity_of(p, resolver, world).ok_or_else(|| format!("unknown object \"{p}\""));
    let tgt = |p: &str| target_of(p, resolver, world).ok_or_else(|| format!("unknown target \"{p}\""));
    let mut steps = Vec::new();
    // motion is skipped by robots that cannot move; reach is checked at run time
    let approach = |steps: &mut Vec<SkillCall>, t: Target| {
        if in_library(&lib, SkillKind::MoveTo) {
            steps.push(SkillCall::MoveTo { target: t, cargo: None });
        }
    };
    match &intent {
        Intent::Wait => {}
        Intent::Sit => steps.push(SkillCall::Sit),
        Intent::Stand => steps.push(SkillCall::Stand),
        Intent::Approach { object } => {
            let o = obj(object)?;
            if in_library(&lib, SkillKind::Find) {
                steps.push(SkillCall::Find { object: o.clone() });
            }
            steps.push(SkillCall::Reach { object: o });
        }
        Intent::Find { object } => steps.push(SkillCall::Find { object: obj(object)? }),
        Intent::MoveTo { target } | Intent::Fly { target } => {
            steps.push(SkillCall::MoveTo { target: tgt(target)?, cargo: None })
        }
        Intent::FormationCarry { object, target } => {
            let mut group: Vec<RobotId> = peers.to_vec();
            if !group.contains(&spec.id) {
                group.push(spec.id.clone());
            }
            group.sort();
            steps.push(SkillCall::FormCarry { group, object: obj(object)?, target: tgt(target)? });
        }
        Intent::Carry { object, target } => {
            let o = obj(object)?;
            let t = tgt(target)?;
            if world.parent(&o) == Some(spec.id.as_str()) {
                steps.push(SkillCall::MoveTo { target: t, cargo: Some(o) });
            } else {
                approach(&mut steps, Target::named(&o));
                steps.push(SkillCall::Pick { object: o.clone() });
                approach(&mut steps, t.clone());
                steps.push(SkillCall::Place { object: o, target: t });
            }
        }
        Intent::PickPlace { object, target } => {
            let o = obj(object)?;
            let t = tgt(target)?;
            approach(&mut steps, Target::named(&o));
            steps.push(SkillCall::Pick { object: o.clone() });
            approach(&mut steps, t.clone());
            steps.push(SkillCall::Place { object: o, target: t });
        }
        Intent::Pick { object } => {
            let o = obj(object)?;
            approach(&mut steps, Target::named(&o));
            steps.push(SkillCall::Pick { object: o });
        }
        Intent::Place { object, target } => {
            let o = obj(object)?;
            let t = tgt(target)?;
            approach(&mut steps, t.clone());
            steps.push(SkillCall::Place { object: o, target: t });
        }
        Intent::Push { object, target } => {
            let o = obj(object)?;
            if in_library(&lib, SkillKind::MoveTo) && in_library(&lib, SkillKind::Reach) {
                steps.push(SkillCall::Reach { object: o.clone() });
            }
            steps.push(SkillCall::Push { object: o, target: tgt(target)? });
        }
        Intent::Survey { region } => {
            let r = match resolver.resolve(region) {
                Some(Referent::Region(r)) => r,
                _ => return Err(format!("unknown region \"{region}\"")),
            };
            steps.push(SkillCall::Survey { region: r });
        }
        Intent::Deliver { object, target } => {
            // a plural class ("the survivors") is a standing order served by later events
            if names_a_class(target, world) {
                return Ok(SkillProgram { steps, instruction: instruction.into(), composer: Composer::Rule });
            }
            let t = tgt(target)?;
            let cargo = world
                .children(&spec.id)
                .into_iter()
                .find(|c| {
                    let aliases = &world.entities[*c].aliases;
                    mentions_entity(object, c, aliases) || mentions_entity(&format!("{object}s"), c, aliases)
                })
                .map(str::to_string)
                .ok_or_else(|| format!("no {object} loaded"))?;
            approach(&mut steps, t.clone());
            steps.push(SkillCall::Place { object: cargo, target: t });
        }
    }
    if let Some(missing) = steps.iter().find(|s| !in_library(&lib, s.kind())) {
        return Err(format!("skill {} not in library", missing.kind().name()));
    }
    Ok(SkillProgram { steps, instruction: instruction.into(), composer: Composer::Rule })
}

/// Split `a, (1,2), b` on top-level commas.
fn split_args(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '(' | '[' => {
                depth += 1;
                cur.push(c);
            }
            ')' | ']' => {
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out.into_iter().map(|a| a.trim().trim_matches(|c| c == '"' || c == '\'').to_string()).filter(|a| !a.is_empty()).collect()
}

/// Parse `name(args)` lines of a model reply into skill calls.
pub fn parse_program(
    reply: &str,
    spec: &RobotSpec,
    resolver: &Resolver,
    world: &WorldState,
    peers: &[RobotId],
) -> Result<Vec<SkillCall>, String> {
    let re = regex::Regex::new(r"^\s*(?:[-*\d.]+\s*)?`?([a-z_]+)\s*(?:\((.*)\))?`?\s*;?\s*$").expect("program regex");
    let lib = library(spec);
    let mut steps = Vec::new();
    for line in reply.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("```") || line.starts_with('#') {
            continue;
        }
        let Some(c) = re.captures(line) else { continue };
        let Some(kind) = SkillKind::from_name(&c[1]) else { continue };
        if !in_library(&lib, kind) {
            return Err(format!("skill {} not in library", kind.name()));
        }
        let mut args = c.get(2).map(|m| split_args(m.as_str())).unwrap_or_default();
        // a bare "x, y" pair is one coordinate argument
        if args.len() >= 2 && args[args.len() - 2].parse::<f64>().is_ok() && args[args.len() - 1].parse::<f64>().is_ok() {
            let y = args.pop().unwrap_or_default();
            let x = args.pop().unwrap_or_default();
            args.push(format!("({x},{y})"));
        }
        let need = |n: usize| -> Result<(), String> {
            if args.len() < n {
                Err(format!("{} expects {n} argument(s)", kind.name()))
            } else {
                Ok(())
            }
        };
        let obj = |p: &str| entity_of(p, resolver, world).ok_or_else(|| format!("unknown object \"{p}\""));
        let tgt = |p: &str| target_of(p, resolver, world).ok_or_else(|| format!("unknown target \"{p}\""));
        let call = match kind {
            SkillKind::MoveTo => {
                need(1)?;
                let t = tgt(&args[0])?;
                let cargo = world.children(&spec.id).first().map(|s| s.to_string());
                SkillCall::MoveTo { target: t, cargo }
            }
            SkillKind::Find => {
                need(1)?;
                SkillCall::Find { object: obj(&args[0])? }
            }
            SkillKind::Reach => {
                need(1)?;
                SkillCall::Reach { object: obj(&args[0])? }
            }
            SkillKind::Pick => {
                need(1)?;
                SkillCall::Pick { object: obj(&args[0])? }
            }
            SkillKind::Place => {
                need(2)?;
                SkillCall::Place { object: obj(&args[0])?, target: tgt(&args[1])? }
            }
            SkillKind::Push => {
                need(2)?;
                SkillCall::Push { object: obj(&args[0])?, target: tgt(&args[1])? }
            }
            SkillKind::FormCarry => {
                need(2)?;
                let mut group: Vec<RobotId> = peers.to_vec();
                if !group.contains(&spec.id) {
                    group.push(spec.id.clone());
                }
                group.sort();
                SkillCall::FormCarry { group, object: obj(&args[0])?, target: tgt(&args[1])? }
            }
            SkillKind::Survey => {
                need(1)?;
                match resolver.resolve(&args[0]) {
                    Some(Referent::Region(r)) => SkillCall::Survey { region: r },
                    _ => return Err(format!("unknown region \"{}\"", args[0])),
                }
            }
            SkillKind::Sit => SkillCall::Sit,
            SkillKind::Stand => SkillCall::Stand,
        };
        steps.push(call);
    }
    Ok(steps)
}

pub fn compose_prompt(instruction: &str, spec: &RobotSpec, status: &RobotStatus) -> String {
    let mut p = format!("You control robot {} ({}).\nSkill library:\n", spec.id, spec.kind);
    for e in library(spec) {
        p.push_str(&format!("- {}({}): {}\n", e.name, e.params.join(", "), e.description));
    }
    p.push_str(&format!(
        "Status: posture {}, position {}, busy {}\n",
        status.posture.as_deref().unwrap_or("none"),
        status.position,
        status.busy
    ));
    p.push_str(&format!("Instruction: {instruction}\n"));
    p.push_str("Reply with one skill call per line, for example move_to(3, 0). Reply with nothing else.\n");
    p
}

/// RULE relevance: the entity is named by a team instruction, or it just fell
/// off a teammate.
pub fn classify_event_rule(observation: &Observation, aliases: &[String], team: &[TeamStep]) -> Relevance {
    let entity = observation.entity();
    let named = team.iter().any(|s| mentions_entity(&s.instruction, entity, aliases));
    let teammate_cargo = match observation {
        Observation::Detached { from, .. } => team.iter().any(|s| &s.assignee == from),
        _ => false,
    };
    if named || teammate_cargo {
        Relevance::Relevant
    } else {
        Relevance::Irrelevant
    }
}

pub fn classify_prompt(observation: &Observation, team: &[TeamStep]) -> String {
    let mut p = String::from("Team tasks in progress:\n");
    for s in team {
        p.push_str(&format!("- {}: {}\n", s.assignee, s.instruction));
    }
    p.push_str(&format!("Observation: {}\n", observation.describe()));
    p.push_str("Does this observation affect any task? Answer RELEVANT or IRRELEVANT.\n");
    p
}

fn parse_relevance(reply: &str) -> Option<Relevance> {
    let up = reply.to_ascii_uppercase();
    match (up.contains("IRRELEVANT"), up.replace("IRRELEVANT", "").contains("RELEVANT")) {
        (true, false) => Some(Relevance::Irrelevant),
        (false, true) => Some(Relevance::Relevant),
        _ => None,
    }
}

/// One audit line of the agent decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum AgentDecision {
    Compose { tick: u64, robot: RobotId, instruction: String, program: Vec<String>, composer: Composer },
    ComposeFailed { tick: u64, robot: RobotId, instruction: String, reason: String },
    Classify { tick: u64, robot: RobotId, observation: String, relevance: Relevance, degraded: bool },
    Rejected { tick: u64, robot: RobotId, record_id: RecordId, reason: String },
}

#[derive(Debug, Clone)]
struct Job {
    record_id: RecordId,
    epoch: u32,
    program: SkillProgram,
    next: usize,
    running: bool,
}

/// What the agent wants done this tick.
#[derive(Debug, Default)]
pub struct AgentOutput {
    pub commands: Vec<WorldCommand>,
    pub messages: Vec<(String, Payload)>,
}

pub struct RobotAgent {
    pub spec: RobotSpec,
    resolver: Resolver,
    model: Option<Box<dyn ChatModel>>,
    job: Option<Job>,
    team: Vec<TeamStep>,
    cursor: ObserverCursor,
    decisions: Vec<AgentDecision>,
    events_sent: u64,
}

impl std::fmt::Debug for RobotAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RobotAgent").field("id", &self.spec.id).field("busy", &self.job.is_some()).finish()
    }
}

impl RobotAgent {
    pub fn new(spec: RobotSpec, config: &ScenarioConfig) -> Self {
        Self {
            spec,
            resolver: Resolver::new(config),
            model: None,
            job: None,
            team: Vec::new(),
            cursor: ObserverCursor::default(),
            decisions: Vec::new(),
            events_sent: 0,
        }
    }

    /// Compose and classify through a language model instead of the rules.
    pub fn with_model(mut self, model: Box<dyn ChatModel>) -> Self {
        self.model = Some(model);
        self
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn is_busy(&self) -> bool {
        self.job.is_some()
    }

    pub fn current_record(&self) -> Option<RecordId> {
        self.job.as_ref().map(|j| j.record_id)
    }

    pub fn decisions(&self) -> &[AgentDecision] {
        &self.decisions
    }

    pub fn status(&self, world: &WorldState) -> RobotStatus {
        RobotStatus {
            posture: world.posture(&self.spec.id).map(str::to_string),
            position: world.position(&self.spec.id).unwrap_or_default(),
            busy: self.job.is_some(),
        }
    }

    fn report(&self, out: &mut AgentOutput, world: &WorldState, record_id: RecordId, epoch: u32, status: TaskStatus, reason: Option<String>) {
        let mut robot = self.status(world);
        robot.busy = status == TaskStatus::InProgress;
        out.messages.push((MANAGER.into(), Payload::StatusUpdate { record_id, epoch, status, reason, robot }));
    }

    fn compose(&mut self, instruction: &str, world: &WorldState, peers: &[RobotId]) -> Result<SkillProgram, String> {
        let Some(model) = self.model.as_mut() else {
            return compose_rule(instruction, &self.spec, &self.resolver, world, peers);
        };
        let mut status = RobotStatus {
            posture: world.posture(&self.spec.id).map(str::to_string),
            position: world.position(&self.spec.id).unwrap_or_default(),
            busy: false,
        };
        status.busy = false;
        let reply = model.complete(&compose_prompt(instruction, &self.spec, &status)).map_err(|e| e.to_string())?;
        let steps = parse_program(&reply, &self.spec, &self.resolver, world, peers)?;
        if steps.is_empty() && !matches!(parse_intent(instruction), Some(Intent::Wait)) {
            return Err("model reply contains no skill calls".into());
        }
        Ok(SkillProgram { steps, instruction: instruction.into(), composer: Composer::Llm })
    }

    pub fn handle(&mut self, env: &Envelope, world: &WorldState, out: &mut AgentOutput) {
        let tick = world.tick;
        match &env.payload {
            Payload::AssignTask { record_id, epoch, instruction, sync_peers, .. } => {
                if let Some(j) = &self.job {
                    let reason = format!("busy with record {}", j.record_id);
                    self.decisions.push(AgentDecision::Rejected {
                        tick,
                        robot: self.spec.id.clone(),
                        record_id: *record_id,
                        reason: reason.clone(),
                    });
                    self.report(out, world, *record_id, *epoch, TaskStatus::Interrupted, Some(reason));
                    return;
                }
                match self.compose(instruction, world, sync_peers) {
                    Ok(program) => {
                        self.decisions.push(AgentDecision::Compose {
                            tick,
                            robot: self.spec.id.clone(),
                            instruction: instruction.clone(),
                            program: program.steps.iter().map(|s| s.to_string()).collect(),
                            composer: program.composer,
                        });
                        if program.steps.is_empty() {
                            self.report(out, world, *record_id, *epoch, TaskStatus::Completed, None);
                        } else {
                            self.job = Some(Job { record_id: *record_id, epoch: *epoch, program, next: 0, running: false });
                        }
                    }
                    Err(reason) => {
                        self.decisions.push(AgentDecision::ComposeFailed {
                            tick,
                            robot: self.spec.id.clone(),
                            instruction: instruction.clone(),
                            reason: reason.clone(),
                        });
                        let reason = format!("composition failure: {reason}");
                        self.report(out, world, *record_id, *epoch, TaskStatus::Interrupted, Some(reason));
                    }
                }
            }
            Payload::CancelTask { record_id, epoch } => {
                let matches = self.job.as_ref().is_some_and(|j| j.record_id == *record_id && j.epoch == *epoch);
                if matches {
                    let j = self.job.take().expect("checked");
                    if j.running {
                        out.commands.push(WorldCommand::Abort);
                    }
                    self.report(out, world, j.record_id, j.epoch, TaskStatus::Interrupted, Some("cancelled".into()));
                }
            }
            Payload::PlanPosted { team, .. } => self.team = team.clone(),
            _ => {}
        }
    }

    /// Submit the next skill of the running program, if any.
    pub fn next_command(&mut self, out: &mut AgentOutput) {
        if let Some(j) = self.job.as_mut() {
            if !j.running {
                if let Some(call) = j.program.steps.get(j.next) {
                    out.commands.push(WorldCommand::Start(call.clone()));
                    j.running = true;
                }
            }
        }
    }

    pub fn on_outcome(&mut self, outcome: &SkillOutcome, world: &WorldState, out: &mut AgentOutput) {
        let Some(j) = self.job.as_mut() else { return };
        if !j.running || j.program.steps.get(j.next) != Some(&outcome.call) {
            return;
        }
        j.running = false;
        match &outcome.result {
            SkillResult::Completed => {
                j.next += 1;
                if j.next == j.program.steps.len() {
                    let j = self.job.take().expect("present");
                    self.report(out, world, j.record_id, j.epoch, TaskStatus::Completed, None);
                }
            }
            SkillResult::Failed { reason } => {
                let j = self.job.take().expect("present");
                self.report(out, world, j.record_id, j.epoch, TaskStatus::Interrupted, Some(reason.clone()));
            }
        }
    }

    /// Observe, classify and report relevant events.
    pub fn sense(&mut self, world: &WorldState, out: &mut AgentOutput) {
        let radius = self.spec.sensing_radius;
        for obs in observe(world, &self.spec.id, radius, &mut self.cursor) {
            let aliases = world.entities.get(obs.entity()).map(|e| e.aliases.clone()).unwrap_or_default();
            let rule = classify_event_rule(&obs, &aliases, &self.team);
            let (relevance, degraded) = match self.model.as_mut() {
                None => (rule, false),
                Some(m) => match m.complete(&classify_prompt(&obs, &self.team)).ok().as_deref().and_then(parse_relevance) {
                    Some(r) => (r, false),
                    None => (rule, true),
                },
            };
            if degraded {
                tracing::warn!(robot = %self.spec.id, "relevance reply unparseable, using rule verdict");
            }
            self.decisions.push(AgentDecision::Classify {
                tick: world.tick,
                robot: self.spec.id.clone(),
                observation: obs.describe(),
                relevance,
                degraded,
            });
            if relevance == Relevance::Relevant {
                self.events_sent += 1;
                let event = Event {
                    event_id: format!("{}-{}", self.spec.id, self.events_sent),
                    source: self.spec.id.clone(),
                    description: obs.describe(),
                    tick: world.tick,
                    relevance,
                    observation: Some(obs),
                };
                out.messages.push((MANAGER.into(), Payload::EventReport { event }));
            }
        }
    }
}
