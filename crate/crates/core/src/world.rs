//! Deterministic kinematic 2D world.
//!
//! One [`WorldState::step`] advances exactly one tick: running skills make
//! progress first (robots in id order), then script effects due at the new
//! tick are applied, then running skills whose guards broke are failed.
//! Skill effects other than motion land only when the skill completes.
//!
//! Nominal skill outcomes are not recorded as observable changes; only
//! scripted disturbances and outcomes that deviate from the skill's intent
//! (an object pushed toward a container that misses it) are.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{EntityId, Observation, Region, RobotId, RobotSpec, ScenarioConfig, Vec2};

const EPS: f64 = 1e-9;

/// Free-form reference to a place: a coordinate, or the name of an entity or
/// location. In JSON a coordinate is written `[x, y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Coord([f64; 2]),
    Named(String),
}

impl Target {
    pub fn coord(p: Vec2) -> Self {
        Target::Coord([p.x, p.y])
    }

    pub fn named(s: impl Into<String>) -> Self {
        Target::Named(s.into())
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Coord([x, y]) => write!(f, "{}", Vec2::new(*x, *y)),
            Target::Named(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillKind {
    MoveTo,
    Find,
    Reach,
    Pick,
    Place,
    Sit,
    Stand,
    Push,
    FormCarry,
    Survey,
}

impl SkillKind {
    pub const ALL: [SkillKind; 10] = [
        SkillKind::MoveTo,
        SkillKind::Find,
        SkillKind::Reach,
        SkillKind::Pick,
        SkillKind::Place,
        SkillKind::Sit,
        SkillKind::Stand,
        SkillKind::Push,
        SkillKind::FormCarry,
        SkillKind::Survey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SkillKind::MoveTo => "move_to",
            SkillKind::Find => "find",
            SkillKind::Reach => "reach",
            SkillKind::Pick => "pick",
            SkillKind::Place => "place",
            SkillKind::Sit => "sit",
            SkillKind::Stand => "stand",
            SkillKind::Push => "push",
            SkillKind::FormCarry => "form_carry",
            SkillKind::Survey => "survey",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// One parameterised skill invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "skill", rename_all = "snake_case")]
pub enum SkillCall {
    /// Straight-line motion. With `cargo` set, the move is a transport and
    /// fails as soon as the cargo is no longer attached to the robot.
    MoveTo { target: Target, #[serde(default)] cargo: Option<EntityId> },
    Find { object: EntityId },
    Reach { object: EntityId },
    Pick { object: EntityId },
    Place { object: EntityId, target: Target },
    Sit,
    Stand,
    Push { object: EntityId, target: Target },
    FormCarry { group: Vec<RobotId>, object: EntityId, target: Target },
    Survey { region: String },
}

impl SkillCall {
    pub fn kind(&self) -> SkillKind {
        match self {
            SkillCall::MoveTo { .. } => SkillKind::MoveTo,
            SkillCall::Find { .. } => SkillKind::Find,
            SkillCall::Reach { .. } => SkillKind::Reach,
            SkillCall::Pick { .. } => SkillKind::Pick,
            SkillCall::Place { .. } => SkillKind::Place,
            SkillCall::Sit => SkillKind::Sit,
            SkillCall::Stand => SkillKind::Stand,
            SkillCall::Push { .. } => SkillKind::Push,
            SkillCall::FormCarry { .. } => SkillKind::FormCarry,
            SkillCall::Survey { .. } => SkillKind::Survey,
        }
    }

    /// Entity and location names the call refers to.
    fn references(&self) -> Vec<&str> {
        fn t(t: &Target) -> Option<&str> {
            match t {
                Target::Named(s) => Some(s.as_str()),
                Target::Coord(_) => None,
            }
        }
        match self {
            SkillCall::MoveTo { target, cargo } => t(target).into_iter().chain(cargo.as_deref()).collect(),
            SkillCall::Find { object } | SkillCall::Reach { object } | SkillCall::Pick { object } => vec![object],
            SkillCall::Place { object, target } | SkillCall::Push { object, target } => {
                std::iter::once(object.as_str()).chain(t(target)).collect()
            }
            SkillCall::FormCarry { group, object, target } => group
                .iter()
                .map(String::as_str)
                .chain(std::iter::once(object.as_str()))
                .chain(t(target))
                .collect(),
            SkillCall::Survey { .. } | SkillCall::Sit | SkillCall::Stand => vec![],
        }
    }
}

impl fmt::Display for SkillCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkillCall::MoveTo { target, .. } => write!(f, "move_to({target})"),
            SkillCall::Find { object } => write!(f, "find({object})"),
            SkillCall::Reach { object } => write!(f, "reach({object})"),
            SkillCall::Pick { object } => write!(f, "pick({object})"),
            SkillCall::Place { object, target } => write!(f, "place({object}, {target})"),
            SkillCall::Sit => f.write_str("sit"),
            SkillCall::Stand => f.write_str("stand"),
            SkillCall::Push { object, target } => write!(f, "push({object}, {target})"),
            SkillCall::FormCarry { group, object, target } => {
                write!(f, "form_carry([{}], {object}, {target})", group.join(", "))
            }
            SkillCall::Survey { region } => write!(f, "survey({region})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Precondition {
    Satisfied,
    Violated(String),
}

impl Precondition {
    pub fn is_satisfied(&self) -> bool {
        matches!(self, Precondition::Satisfied)
    }
}

/// Tunables loaded from the scenario's `world` key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    /// Offset from the aimed point to where a pushed object lands.
    pub push_offset: [f64; 2],
    /// A container captures objects landing within this distance.
    pub capture_radius: f64,
    /// Formation members must be this close to the carried object.
    pub formation_radius: f64,
    /// Ticks a formation barrier waits for all members.
    pub barrier_window: u64,
    /// Uniform jitter added to final poses of motions (0 disables).
    pub pose_noise: f64,
    pub rng_seed: u64,
    /// Ticks between a change and the earliest tick a sensor reports it.
    pub detection_latency: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            push_offset: [0.0, 0.0],
            capture_radius: 0.3,
            formation_radius: 1.0,
            barrier_window: 5,
            pose_noise: 0.0,
            rng_seed: 0,
            detection_latency: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScriptEffect {
    Detach { object: EntityId },
    Spawn {
        object: EntityId,
        position: Vec2,
        #[serde(default)]
        kind: String,
        #[serde(default)]
        aliases: Vec<String>,
    },
    Move { object: EntityId, position: Vec2 },
    /// Physical placement of `object` onto `parent` by an off-robot actor.
    Attach { object: EntityId, parent: EntityId },
    HumanUtterance {
        #[serde(default = "default_speaker")]
        from: String,
        text: String,
    },
}

fn default_speaker() -> String {
    "user".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub tick: u64,
    pub effect: ScriptEffect,
}

/// Ordered list of scripted disturbances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventScript {
    entries: Vec<ScriptEntry>,
}

impl EventScript {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, String> {
        if entries.windows(2).any(|w| w[1].tick < w[0].tick) {
            return Err("script trigger ticks must be nondecreasing".into());
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    pub fn at(&self, tick: u64) -> impl Iterator<Item = &ScriptEffect> {
        self.entries.iter().filter(move |e| e.tick == tick).map(|e| &e.effect)
    }

    pub fn is_valid(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].tick <= w[1].tick)
    }

    pub fn last_tick(&self) -> u64 {
        self.entries.last().map(|e| e.tick).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub position: Vec2,
    #[serde(default)]
    pub posture: Option<String>,
    #[serde(default)]
    pub parent: Option<EntityId>,
    #[serde(default)]
    pub is_robot: bool,
    /// Object held in this robot's gripper.
    #[serde(default)]
    pub gripper: Option<EntityId>,
    #[serde(skip)]
    pub container: bool,
    #[serde(skip)]
    pub discoverable: bool,
    #[serde(skip)]
    pub aliases: Vec<String>,
}

/// A change a camera could notice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldChange {
    pub seq: u64,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq)]
struct ActiveSkill {
    call: SkillCall,
    started: u64,
    /// Ticks of work left for fixed-duration skills.
    remaining: u32,
    waypoints: Vec<Vec2>,
    /// Formation carry has passed its barrier.
    released: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SkillResult {
    Completed,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillOutcome {
    pub robot: RobotId,
    pub call: SkillCall,
    pub result: SkillResult,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorldCommand {
    Start(SkillCall),
    Abort,
}

/// Everything one tick produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub outcomes: Vec<SkillOutcome>,
    pub changes: Vec<WorldChange>,
    pub utterances: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub tick: u64,
    pub entities: BTreeMap<EntityId, Entity>,
    pub params: WorldParams,
    robots: BTreeMap<RobotId, RobotSpec>,
    locations: BTreeMap<String, Vec2>,
    regions: BTreeMap<String, Region>,
    active: BTreeMap<RobotId, ActiveSkill>,
    changes: Vec<WorldChange>,
}

/// Serializable view used for digests, logs and the UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub tick: u64,
    pub entities: BTreeMap<EntityId, Entity>,
    pub active: BTreeMap<RobotId, String>,
}

fn with_kind(aliases: &[String], kind: &str) -> Vec<String> {
    let mut out = aliases.to_vec();
    if !kind.is_empty() && !out.iter().any(|a| a == kind) {
        out.push(kind.to_string());
    }
    out
}

impl WorldState {
    pub fn new(config: &ScenarioConfig, params: WorldParams) -> Self {
        let mut entities = BTreeMap::new();
        for r in &config.robots {
            entities.insert(
                r.id.clone(),
                Entity {
                    position: r.initial_pose.position,
                    posture: Some(r.initial_pose.posture.clone()),
                    parent: None,
                    is_robot: true,
                    gripper: None,
                    container: false,
                    discoverable: false,
                    aliases: r.aliases.clone(),
                },
            );
        }
        for o in &config.objects {
            entities.insert(
                o.id.clone(),
                Entity {
                    position: o.position,
                    posture: None,
                    parent: o.attached_to.clone(),
                    is_robot: false,
                    gripper: None,
                    container: o.container,
                    discoverable: o.discoverable,
                    aliases: with_kind(&o.aliases, &o.kind),
                },
            );
        }
        let mut w = Self {
            tick: 0,
            entities,
            params,
            robots: config.robots.iter().map(|r| (r.id.clone(), r.clone())).collect(),
            locations: config.locations.clone(),
            regions: config.regions.clone(),
            active: BTreeMap::new(),
            changes: Vec::new(),
        };
        w.propagate_attachments();
        w
    }

    pub fn robot_spec(&self, id: &str) -> Option<&RobotSpec> {
        self.robots.get(id)
    }

    pub fn position(&self, id: &str) -> Option<Vec2> {
        self.entities.get(id).map(|e| e.position)
    }

    pub fn posture(&self, id: &str) -> Option<&str> {
        self.entities.get(id).and_then(|e| e.posture.as_deref())
    }

    pub fn parent(&self, id: &str) -> Option<&str> {
        self.entities.get(id).and_then(|e| e.parent.as_deref())
    }

    pub fn is_busy(&self, robot: &str) -> bool {
        self.active.contains_key(robot)
    }

    pub fn active_skill(&self, robot: &str) -> Option<&SkillCall> {
        self.active.get(robot).map(|a| &a.call)
    }

    pub fn changes(&self) -> &[WorldChange] {
        &self.changes
    }

    /// Objects attached (directly) to `id`.
    pub fn children(&self, id: &str) -> Vec<&str> {
        self.entities.iter().filter(|(_, e)| e.parent.as_deref() == Some(id)).map(|(k, _)| k.as_str()).collect()
    }

    pub fn resolve(&self, target: &Target) -> Option<Vec2> {
        match target {
            Target::Coord([x, y]) => Some(Vec2::new(*x, *y)),
            Target::Named(n) => self.position(n).or_else(|| self.locations.get(n).copied()),
        }
    }

    fn knows(&self, name: &str) -> bool {
        self.entities.contains_key(name) || self.locations.contains_key(name) || self.regions.contains_key(name)
    }

    /// Whether `node`'s attachment chain reaches `ancestor`.
    pub fn is_descendant(&self, node: &str, ancestor: &str) -> bool {
        let mut cur = self.parent(node);
        let mut hops = 0;
        while let Some(p) = cur {
            if p == ancestor {
                return true;
            }
            hops += 1;
            if hops > self.entities.len() {
                return false;
            }
            cur = self.parent(p);
        }
        false
    }

    /// Attachment relation is a forest.
    pub fn attachment_is_forest(&self) -> bool {
        self.entities.keys().all(|id| {
            let mut seen = BTreeSet::new();
            let mut cur = Some(id.as_str());
            while let Some(c) = cur {
                if !seen.insert(c) {
                    return false;
                }
                cur = self.parent(c);
                if let Some(p) = cur {
                    if !self.entities.contains_key(p) {
                        return false;
                    }
                }
            }
            true
        })
    }

    /// Attached entities sit exactly on their parent.
    pub fn attachments_coincide(&self) -> bool {
        self.entities.iter().all(|(_, e)| match &e.parent {
            Some(p) => self.position(p).is_some_and(|pp| pp.distance(e.position) < 1e-6),
            None => true,
        })
    }

    fn root_of(&self, id: &str) -> String {
        let mut cur = id.to_string();
        let mut hops = 0;
        while let Some(p) = self.parent(&cur) {
            cur = p.to_string();
            hops += 1;
            if hops > self.entities.len() {
                break;
            }
        }
        cur
    }

    fn propagate_attachments(&mut self) {
        let ids: Vec<EntityId> = self.entities.keys().cloned().collect();
        for id in ids {
            if self.parent(&id).is_some() {
                let root = self.root_of(&id);
                if let Some(p) = self.position(&root) {
                    if let Some(e) = self.entities.get_mut(&id) {
                        e.position = p;
                    }
                }
            }
        }
    }

    fn set_parent(&mut self, child: &str, parent: Option<&str>) -> bool {
        if let Some(p) = parent {
            if p == child || self.is_descendant(p, child) {
                return false;
            }
        }
        // a child leaving a gripper clears it
        for e in self.entities.values_mut() {
            if e.gripper.as_deref() == Some(child) {
                e.gripper = None;
            }
        }
        if let Some(e) = self.entities.get_mut(child) {
            e.parent = parent.map(str::to_string);
        }
        true
    }

    fn record(&mut self, observation: Observation) -> WorldChange {
        let change = WorldChange { seq: self.changes.len() as u64, observation };
        self.changes.push(change.clone());
        change
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            tick: self.tick,
            entities: self.entities.clone(),
            active: self.active.iter().map(|(k, v)| (k.clone(), v.call.to_string())).collect(),
        }
    }

    /// SHA-256 over the canonical JSON of the snapshot.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(&self.snapshot()).expect("snapshot serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn survey_path(&self, robot: &RobotSpec, region: &Region) -> Vec<Vec2> {
        let spacing = (robot.sensing_radius * 1.5).max(0.5);
        let mut pts = Vec::new();
        let mut x = region.min.x;
        let mut up = true;
        loop {
            let (a, b) = if up { (region.min.y, region.max.y) } else { (region.max.y, region.min.y) };
            pts.push(Vec2::new(x, a));
            pts.push(Vec2::new(x, b));
            if x >= region.max.x - EPS {
                break;
            }
            x = (x + spacing).min(region.max.x);
            up = !up;
        }
        pts
    }

    fn jitter(&self, robot: &str, p: Vec2) -> Vec2 {
        if self.params.pose_noise <= 0.0 {
            return p;
        }
        let mut h: u64 = self.params.rng_seed ^ self.tick.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for b in robot.bytes() {
            h = h.rotate_left(5) ^ b as u64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let n = self.params.pose_noise;
        Vec2::new(p.x + rng.gen_range(-n..=n), p.y + rng.gen_range(-n..=n))
    }

    /// Advance one tick.
    pub fn step(&mut self, commands: &[(RobotId, WorldCommand)], script: &EventScript) -> StepReport {
        let mut report = StepReport::default();
        let next = self.tick + 1;

        for (robot, cmd) in commands {
            match cmd {
                WorldCommand::Abort => {
                    self.active.remove(robot);
                }
                WorldCommand::Start(call) => {
                    let fail = |reason: String| SkillOutcome {
                        robot: robot.clone(),
                        call: call.clone(),
                        result: SkillResult::Failed { reason },
                    };
                    let Some(spec) = self.robots.get(robot).cloned() else {
                        report.outcomes.push(fail(format!("unknown robot {robot}")));
                        continue;
                    };
                    if let Some(bad) = call.references().into_iter().find(|r| !self.knows(r)) {
                        report.outcomes.push(fail(format!("unknown entity {bad}")));
                        continue;
                    }
                    if self.active.contains_key(robot) {
                        report.outcomes.push(fail("robot busy".into()));
                        continue;
                    }
                    if let Precondition::Violated(reason) = check_precondition(call, self, &spec) {
                        report.outcomes.push(fail(reason));
                        continue;
                    }
                    let remaining = match call {
                        SkillCall::Find { .. } => 1,
                        SkillCall::Pick { .. } | SkillCall::Place { .. } | SkillCall::Sit | SkillCall::Stand => 2,
                        SkillCall::Push { .. } => 3,
                        _ => 0,
                    };
                    let waypoints = match call {
                        SkillCall::Survey { region } => {
                            self.regions.get(region).map(|r| self.survey_path(&spec, r)).unwrap_or_default()
                        }
                        _ => Vec::new(),
                    };
                    self.active.insert(
                        robot.clone(),
                        ActiveSkill { call: call.clone(), started: self.tick, remaining, waypoints, released: false },
                    );
                }
            }
        }

        self.tick = next;
        self.release_formations(&mut report);

        let robots: Vec<RobotId> = self.active.keys().cloned().collect();
        let mut moved_groups: BTreeSet<Vec<RobotId>> = BTreeSet::new();
        for robot in robots {
            let Some(active) = self.active.get(&robot).cloned() else { continue };
            if let Some(reason) = self.guard_violation(&robot, &active.call) {
                self.active.remove(&robot);
                report.outcomes.push(SkillOutcome { robot, call: active.call, result: SkillResult::Failed { reason } });
                continue;
            }
            if let Some(done) = self.progress(&robot, active, &mut moved_groups, &mut report) {
                report.outcomes.push(done);
            }
        }
        self.propagate_attachments();

        for effect in script.at(next).cloned().collect::<Vec<_>>() {
            self.apply_effect(effect, &mut report);
        }
        self.propagate_attachments();

        let robots: Vec<RobotId> = self.active.keys().cloned().collect();
        for robot in robots {
            let call = self.active[&robot].call.clone();
            if let Some(reason) = self.guard_violation(&robot, &call) {
                self.active.remove(&robot);
                report.outcomes.push(SkillOutcome { robot, call, result: SkillResult::Failed { reason } });
            }
        }
        report
    }

    fn guard_violation(&self, robot: &str, call: &SkillCall) -> Option<String> {
        match call {
            SkillCall::MoveTo { cargo: Some(c), .. } if self.parent(c) != Some(robot) => {
                Some("carry disrupted".to_string())
            }
            SkillCall::MoveTo { .. } | SkillCall::Reach { .. } if self.posture(robot) == Some("sitting") => {
                Some("cannot move while sitting".to_string())
            }
            _ => None,
        }
    }

    fn release_formations(&mut self, report: &mut StepReport) {
        let waiting: Vec<(RobotId, Vec<RobotId>, u64)> = self
            .active
            .iter()
            .filter_map(|(r, a)| match &a.call {
                SkillCall::FormCarry { group, .. } if !a.released => Some((r.clone(), group.clone(), a.started)),
                _ => None,
            })
            .collect();
        let mut groups: BTreeMap<Vec<RobotId>, Vec<(RobotId, u64)>> = BTreeMap::new();
        for (r, mut g, started) in waiting {
            g.sort();
            groups.entry(g).or_default().push((r, started));
        }
        for (group, members) in groups {
            let joined: BTreeSet<&str> = members.iter().map(|(r, _)| r.as_str()).collect();
            if group.iter().all(|g| joined.contains(g.as_str())) {
                for (r, _) in &members {
                    if let Some(a) = self.active.get_mut(r) {
                        a.released = true;
                    }
                }
            } else {
                let oldest = members.iter().map(|(_, s)| *s).min().unwrap_or(self.tick);
                if self.tick.saturating_sub(oldest) > self.params.barrier_window {
                    for (r, _) in members {
                        if let Some(a) = self.active.remove(&r) {
                            report.outcomes.push(SkillOutcome {
                                robot: r,
                                call: a.call,
                                result: SkillResult::Failed { reason: "formation barrier timeout".into() },
                            });
                        }
                    }
                }
            }
        }
    }

    fn move_entity(&mut self, id: &str, to: Vec2) {
        if let Some(e) = self.entities.get_mut(id) {
            e.position = to;
        }
    }

    /// Returns an outcome when the skill finished this tick.
    fn progress(
        &mut self,
        robot: &str,
        mut active: ActiveSkill,
        moved_groups: &mut BTreeSet<Vec<RobotId>>,
        report: &mut StepReport,
    ) -> Option<SkillOutcome> {
        let spec = self.robots.get(robot)?.clone();
        let here = self.position(robot)?;
        let outcome = |call: SkillCall, result: SkillResult| SkillOutcome { robot: robot.to_string(), call, result };
        let call = active.call.clone();
        match &call {
            SkillCall::MoveTo { .. } | SkillCall::Reach { .. } => {
                let goal = match &call {
                    SkillCall::Reach { object } => self.position(object),
                    SkillCall::MoveTo { target, .. } => self.resolve(target),
                    _ => None,
                };
                let Some(goal) = goal else {
                    self.active.remove(robot);
                    return Some(outcome(call, SkillResult::Failed { reason: "target vanished".into() }));
                };
                let pos = here.step_toward(goal, spec.speed);
                self.move_entity(robot, pos);
                if pos.distance(goal) < EPS {
                    let settled = self.jitter(robot, pos);
                    self.move_entity(robot, settled);
                    self.active.remove(robot);
                    return Some(outcome(call, SkillResult::Completed));
                }
                self.active.insert(robot.to_string(), active);
                None
            }
            SkillCall::Survey { .. } => {
                let mut budget = spec.speed;
                let mut pos = here;
                while budget > EPS {
                    let Some(&wp) = active.waypoints.first() else { break };
                    let d = pos.distance(wp);
                    if d <= budget {
                        pos = wp;
                        budget -= d;
                        active.waypoints.remove(0);
                    } else {
                        pos = pos.step_toward(wp, budget);
                        budget = 0.0;
                    }
                }
                self.move_entity(robot, pos);
                if active.waypoints.is_empty() {
                    self.active.remove(robot);
                    return Some(outcome(call, SkillResult::Completed));
                }
                self.active.insert(robot.to_string(), active);
                None
            }
            SkillCall::FormCarry { group, object, target } => {
                if !active.released {
                    self.active.insert(robot.to_string(), active);
                    return None;
                }
                let mut group = group.clone();
                group.sort();
                let (Some(goal), Some(from)) = (self.resolve(target), self.position(object)) else {
                    self.active.remove(robot);
                    return Some(outcome(call, SkillResult::Failed { reason: "target vanished".into() }));
                };
                if moved_groups.insert(group.clone()) {
                    let speed =
                        group.iter().filter_map(|g| self.robots.get(g)).map(|r| r.speed).fold(f64::INFINITY, f64::min);
                    let to = from.step_toward(goal, speed);
                    let delta = to.sub(from);
                    self.move_entity(object, to);
                    for g in &group {
                        if let Some(p) = self.position(g) {
                            self.move_entity(g, p.add(delta));
                        }
                    }
                }
                if self.position(object).is_some_and(|p| p.distance(goal) < EPS) {
                    self.active.remove(robot);
                    return Some(outcome(call, SkillResult::Completed));
                }
                self.active.insert(robot.to_string(), active);
                None
            }
            _ => {
                active.remaining = active.remaining.saturating_sub(1);
                if active.remaining > 0 {
                    self.active.insert(robot.to_string(), active);
                    return None;
                }
                self.active.remove(robot);
                // effects re-check preconditions since the world may have moved on
                if let Precondition::Violated(reason) = check_precondition(&call, self, &spec) {
                    return Some(outcome(call, SkillResult::Failed { reason }));
                }
                let result = self.complete_fixed(robot, &call, report);
                Some(outcome(call, result))
            }
        }
    }

    fn complete_fixed(&mut self, robot: &str, call: &SkillCall, report: &mut StepReport) -> SkillResult {
        match call {
            SkillCall::Pick { object } => {
                self.set_parent(object, Some(robot));
                if let Some(e) = self.entities.get_mut(robot) {
                    e.gripper = Some(object.clone());
                }
            }
            SkillCall::Place { object, target } => match target {
                Target::Named(n) if self.entities.contains_key(n) => {
                    if !self.set_parent(object, Some(n)) {
                        return SkillResult::Failed { reason: "attachment would form a cycle".into() };
                    }
                }
                other => {
                    let Some(p) = self.resolve(other) else {
                        return SkillResult::Failed { reason: format!("unknown target {other}") };
                    };
                    self.set_parent(object, None);
                    self.move_entity(object, p);
                }
            },
            SkillCall::Sit | SkillCall::Stand => {
                let label = if matches!(call, SkillCall::Sit) { "sitting" } else { "standing" };
                if let Some(e) = self.entities.get_mut(robot) {
                    e.posture = Some(label.to_string());
                }
            }
            SkillCall::Push { object, target } => {
                let Some(aim) = self.resolve(target) else {
                    return SkillResult::Failed { reason: format!("unknown target {target}") };
                };
                let [ox, oy] = self.params.push_offset;
                let landing = aim.add(Vec2::new(ox, oy));
                self.set_parent(object, None);
                self.move_entity(object, landing);
                let container = match target {
                    Target::Named(n) if self.entities.get(n).is_some_and(|e| e.container) => Some(n.clone()),
                    _ => None,
                };
                if let Some(c) = container {
                    let inside = landing.distance(aim) <= self.params.capture_radius + 1e-9;
                    if inside {
                        self.set_parent(object, Some(&c));
                    } else {
                        let tick = self.tick;
                        let change = self.record(Observation::Landed {
                            entity: object.clone(),
                            container: c.clone(),
                            inside,
                            position: landing,
                            tick,
                        });
                        report.changes.push(change);
                        return SkillResult::Failed { reason: format!("{object} fell outside the {c}") };
                    }
                }
            }
            _ => {}
        }
        SkillResult::Completed
    }

    fn apply_effect(&mut self, effect: ScriptEffect, report: &mut StepReport) {
        let tick = self.tick;
        match effect {
            ScriptEffect::Detach { object } => {
                let Some(from) = self.parent(&object).map(str::to_string) else { return };
                self.set_parent(&object, None);
                let position = self.position(&object).unwrap_or_default();
                let c = self.record(Observation::Detached { entity: object, from, position, tick });
                report.changes.push(c);
            }
            ScriptEffect::Spawn { object, position, kind, aliases } => {
                let aliases = with_kind(&aliases, &kind);
                self.entities.insert(
                    object.clone(),
                    Entity {
                        position,
                        posture: None,
                        parent: None,
                        is_robot: false,
                        gripper: None,
                        container: false,
                        discoverable: false,
                        aliases,
                    },
                );
                let c = self.record(Observation::Appeared { entity: object, position, tick });
                report.changes.push(c);
            }
            ScriptEffect::Move { object, position } => {
                if !self.entities.contains_key(&object) {
                    return;
                }
                self.set_parent(&object, None);
                self.move_entity(&object, position);
                let c = self.record(Observation::Moved { entity: object, position, tick });
                report.changes.push(c);
            }
            ScriptEffect::Attach { object, parent } => {
                if self.entities.contains_key(&object) && self.entities.contains_key(&parent) {
                    self.set_parent(&object, Some(&parent));
                }
            }
            ScriptEffect::HumanUtterance { from, text } => report.utterances.push((from, text)),
        }
    }

    /// Off-robot placement performed by a human helper; nominal, not observed.
    pub fn human_place(&mut self, object: &str, target: &Target) -> Result<(), String> {
        if !self.entities.contains_key(object) {
            return Err(format!("unknown object {object}"));
        }
        match target {
            Target::Named(n) if self.entities.contains_key(n) => {
                if !self.set_parent(object, Some(n)) {
                    return Err("attachment would form a cycle".into());
                }
            }
            other => {
                let p = self.resolve(other).ok_or_else(|| format!("unknown target {other}"))?;
                self.set_parent(object, None);
                self.move_entity(object, p);
            }
        }
        self.propagate_attachments();
        Ok(())
    }
}

/// Side-effect-free check that `call` may start for `robot` in `world`.
pub fn check_precondition(call: &SkillCall, world: &WorldState, robot: &RobotSpec) -> Precondition {
    use Precondition::*;
    let Some(me) = world.entities.get(&robot.id) else {
        return Violated(format!("unknown robot {}", robot.id));
    };
    let within = |p: Option<Vec2>| p.is_some_and(|p| p.distance(me.position) <= robot.reach + 1e-6);
    match call {
        SkillCall::MoveTo { target, cargo } => {
            if me.posture.as_deref() == Some("sitting") {
                return Violated("cannot move while sitting".into());
            }
            if world.resolve(target).is_none() {
                return Violated(format!("unknown target {target}"));
            }
            if let Some(c) = cargo {
                if world.parent(c) != Some(robot.id.as_str()) {
                    return Violated(format!("{c} is not loaded"));
                }
            }
            Satisfied
        }
        SkillCall::Find { object } => {
            if world.entities.contains_key(object) {
                Satisfied
            } else {
                Violated(format!("{object} not found"))
            }
        }
        SkillCall::Reach { object } => {
            if me.posture.as_deref() == Some("sitting") {
                Violated("cannot move while sitting".into())
            } else if world.entities.contains_key(object) {
                Satisfied
            } else {
                Violated(format!("{object} not found"))
            }
        }
        SkillCall::Pick { object } => {
            if me.gripper.is_some() {
                return Violated("gripper occupied".into());
            }
            let Some(o) = world.entities.get(object) else {
                return Violated(format!("{object} not found"));
            };
            if o.is_robot {
                return Violated("cannot pick a robot".into());
            }
            if world.entities.values().any(|e| e.gripper.as_deref() == Some(object.as_str())) {
                return Violated(format!("{object} is held by another robot"));
            }
            if !within(Some(o.position)) {
                return Violated(format!("{object} out of reach"));
            }
            Satisfied
        }
        SkillCall::Place { object, target } => {
            // carriers set down cargo riding on them without a gripper
            let carried = world.parent(object) == Some(robot.id.as_str()) && me.gripper.is_none();
            if me.gripper.as_deref() != Some(object.as_str()) && !carried {
                return Violated(format!("not holding {object}"));
            }
            if !within(world.resolve(target)) {
                return Violated(format!("{target} out of reach"));
            }
            if let Target::Named(n) = target {
                if let Some(spec) = world.robot_spec(n) {
                    if let Some(needed) = spec.required_posture_for_loading() {
                        if world.posture(n) != Some(needed.as_str()) {
                            return Violated(format!("requires {needed}"));
                        }
                    }
                }
            }
            Satisfied
        }
        SkillCall::Sit | SkillCall::Stand => {
            if robot.has("sit") {
                Satisfied
            } else {
                Violated("robot cannot change posture".into())
            }
        }
        SkillCall::Push { object, target } => {
            if world.resolve(target).is_none() {
                return Violated(format!("unknown target {target}"));
            }
            if !within(world.position(object)) {
                return Violated(format!("{object} out of reach"));
            }
            Satisfied
        }
        SkillCall::FormCarry { group, object, target } => {
            if !group.iter().any(|g| g == &robot.id) {
                return Violated("robot not in formation group".into());
            }
            if world.resolve(target).is_none() {
                return Violated(format!("unknown target {target}"));
            }
            let Some(anchor) = world.position(object) else {
                return Violated(format!("{object} not found"));
            };
            let displaced: Vec<&str> = group
                .iter()
                .filter(|g| {
                    world.position(g).map_or(true, |p| p.distance(anchor) > world.params.formation_radius + 1e-6)
                })
                .map(String::as_str)
                .collect();
            if displaced.is_empty() {
                Satisfied
            } else {
                Violated(format!("not at staging pose: {}", displaced.join(", ")))
            }
        }
        SkillCall::Survey { region } => {
            if world.regions.contains_key(region) {
                Satisfied
            } else {
                Violated(format!("unknown region {region}"))
            }
        }
    }
}

/// Per-robot read position into the change log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObserverCursor {
    pub next_seq: u64,
    pub discovered: BTreeSet<EntityId>,
}

/// Changes within `radius` of `robot` since the cursor, plus first sightings
/// of discoverable entities. Robots without a camera observe nothing.
pub fn observe(world: &WorldState, robot: &str, radius: f64, cursor: &mut ObserverCursor) -> Vec<Observation> {
    let start = (cursor.next_seq as usize).min(world.changes.len());
    // the change log is tick-ordered, so visibility is a prefix
    let visible = world.changes[start..]
        .iter()
        .take_while(|c| c.observation.tick() + world.params.detection_latency <= world.tick)
        .count();
    let fresh = &world.changes[start..start + visible];
    cursor.next_seq = (start + visible) as u64;
    let (Some(spec), Some(here)) = (world.robot_spec(robot), world.position(robot)) else {
        return Vec::new();
    };
    if !spec.has("camera") {
        return Vec::new();
    }
    let mut out: Vec<Observation> =
        fresh.iter().filter(|c| c.observation.position().distance(here) <= radius).map(|c| c.observation.clone()).collect();
    for (id, e) in &world.entities {
        if e.discoverable && e.position.distance(here) <= radius && cursor.discovered.insert(id.clone()) {
            out.push(Observation::Appeared { entity: id.clone(), position: e.position, tick: world.tick });
        }
    }
    out
}

fn default_tolerance() -> f64 {
    0.3
}

/// Goal condition over the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Predicate {
    At {
        entity: EntityId,
        target: Target,
        #[serde(default = "default_tolerance")]
        tolerance: f64,
    },
    Attached { child: EntityId, parent: EntityId },
    Posture { robot: RobotId, label: String },
}

impl Predicate {
    /// Unknown references evaluate false.
    pub fn holds(&self, world: &WorldState) -> bool {
        let known = |id: &str| {
            let k = world.entities.contains_key(id);
            if !k {
                tracing::warn!(entity = id, "goal references unknown entity");
            }
            k
        };
        match self {
            Predicate::At { entity, target, tolerance } => {
                known(entity)
                    && match (world.position(entity), world.resolve(target)) {
                        (Some(p), Some(t)) => p.distance(t) <= *tolerance,
                        _ => false,
                    }
            }
            Predicate::Attached { child, parent } => {
                known(child) && known(parent) && world.parent(child) == Some(parent.as_str())
            }
            Predicate::Posture { robot, label } => known(robot) && world.posture(robot) == Some(label.as_str()),
        }
    }
}

pub fn goal_satisfied(world: &WorldState, goals: &[Predicate]) -> bool {
    goals.iter().all(|g| g.holds(world))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config() -> ScenarioConfig {
        serde_json::from_value(serde_json::json!({
            "name": "t",
            "robots": [
                {"id": "dog", "capabilities": ["navigate", "carry", "sit"],
                 "constraints": ["place_on requires sitting"],
                 "initial_pose": {"position": {"x": 0.0, "y": 0.0}}, "speed": 0.5},
                {"id": "arm", "capabilities": ["navigate", "pick", "place", "camera"],
                 "initial_pose": {"position": {"x": 0.5, "y": 0.0}}}
            ],
            "locations": {"dock": {"x": 3.0, "y": 0.0}},
            "objects": [
                {"id": "cube", "kind": "cube", "position": {"x": 0.0, "y": 0.0}, "attached_to": "dog"},
                {"id": "cup", "kind": "cup", "position": {"x": 0.7, "y": 0.0}}
            ]
        }))
        .unwrap()
    }

    fn start(call: SkillCall) -> WorldCommand {
        WorldCommand::Start(call)
    }

    fn run_until_outcome(w: &mut WorldState, robot: &str, script: &EventScript) -> SkillResult {
        for _ in 0..200 {
            let r = w.step(&[], script);
            if let Some(o) = r.outcomes.into_iter().find(|o| o.robot == robot) {
                return o.result;
            }
        }
        panic!("no outcome");
    }

    #[test]
    fn carried_cargo_moves_with_carrier() {
        let mut w = WorldState::new(&config(), WorldParams::default());
        let call = SkillCall::MoveTo { target: Target::named("dock"), cargo: Some("cube".into()) };
        w.step(&[("dog".into(), start(call))], &EventScript::default());
        assert_eq!(run_until_outcome(&mut w, "dog", &EventScript::default()), SkillResult::Completed);
        assert_eq!(w.position("cube"), Some(Vec2::new(3.0, 0.0)));
        assert!(w.attachments_coincide());
    }

    #[test]
    fn detach_mid_carry_fails_with_carry_disrupted() {
        let script = EventScript::new(vec![ScriptEntry {
            tick: 3,
            effect: ScriptEffect::Detach { object: "cube".into() },
        }])
        .unwrap();
        let mut w = WorldState::new(&config(), WorldParams::default());
        let call = SkillCall::MoveTo { target: Target::named("dock"), cargo: Some("cube".into()) };
        w.step(&[("dog".into(), start(call))], &script);
        let SkillResult::Failed { reason } = run_until_outcome(&mut w, "dog", &script) else { panic!() };
        assert!(reason.contains("carry disrupted"), "{reason}");
        assert_eq!(w.parent("cube"), None);
    }

    #[test]
    fn loading_a_standing_carrier_is_refused() {
        let cfg = config();
        let mut w = WorldState::new(&cfg, WorldParams::default());
        w.step(&[("arm".into(), start(SkillCall::Pick { object: "cup".into() }))], &EventScript::default());
        assert_eq!(run_until_outcome(&mut w, "arm", &EventScript::default()), SkillResult::Completed);
        let call = SkillCall::Place { object: "cup".into(), target: Target::named("dog") };
        let p = check_precondition(&call, &w, cfg.robot("arm").unwrap());
        assert!(matches!(p, Precondition::Violated(ref m) if m.contains("requires sitting")), "{p:?}");
    }

    #[test]
    fn spawn_registers_kind_as_alias() {
        let script = EventScript::new(vec![ScriptEntry {
            tick: 1,
            effect: ScriptEffect::Spawn {
                object: "red_1".into(),
                position: Vec2::new(1.5, 0.0),
                kind: "red object".into(),
                aliases: vec![],
            },
        }])
        .unwrap();
        let mut w = WorldState::new(&config(), WorldParams::default());
        w.step(&[], &script);
        assert_eq!(w.entities["red_1"].aliases, vec!["red object".to_string()]);
    }

    #[test]
    fn detection_latency_delays_observation() {
        let script = EventScript::new(vec![ScriptEntry {
            tick: 1,
            effect: ScriptEffect::Move { object: "cup".into(), position: Vec2::new(1.5, 0.5) },
        }])
        .unwrap();
        let params = WorldParams { detection_latency: 2, ..WorldParams::default() };
        let mut w = WorldState::new(&config(), params);
        let mut cursor = ObserverCursor::default();
        let mut seen_at = None;
        for _ in 0..5 {
            w.step(&[], &script);
            if !observe(&w, "arm", 3.0, &mut cursor).is_empty() && seen_at.is_none() {
                seen_at = Some(w.tick);
            }
        }
        assert_eq!(seen_at, Some(3));
    }

    #[test]
    fn robots_without_camera_observe_nothing() {
        let script = EventScript::new(vec![ScriptEntry {
            tick: 1,
            effect: ScriptEffect::Detach { object: "cube".into() },
        }])
        .unwrap();
        let mut w = WorldState::new(&config(), WorldParams::default());
        w.step(&[], &script);
        assert!(observe(&w, "dog", 3.0, &mut ObserverCursor::default()).is_empty());
        assert_eq!(observe(&w, "arm", 3.0, &mut ObserverCursor::default()).len(), 1);
    }

    #[test]
    fn script_rejects_decreasing_ticks() {
        let e = |tick| ScriptEntry { tick, effect: ScriptEffect::Detach { object: "cube".into() } };
        assert!(EventScript::new(vec![e(5), e(2)]).is_err());
        assert!(EventScript::new(vec![e(2), e(2), e(5)]).is_ok());
    }

    #[test]
    fn goal_with_unknown_entity_is_false() {
        let w = WorldState::new(&config(), WorldParams::default());
        let g = Predicate::Attached { child: "ghost".into(), parent: "dog".into() };
        assert!(!g.holds(&w));
        let g = Predicate::Attached { child: "cube".into(), parent: "dog".into() };
        assert!(g.holds(&w));
    }

    fn arb_call() -> impl Strategy<Value = (usize, SkillCall)> {
        let target = prop_oneof![
            Just(Target::named("dock")),
            Just(Target::named("cup")),
            (-4.0..4.0f64, -4.0..4.0f64).prop_map(|(x, y)| Target::Coord([x, y])),
        ];
        let call = prop_oneof![
            target.clone().prop_map(|t| SkillCall::MoveTo { target: t, cargo: None }),
            target.clone().prop_map(|t| SkillCall::MoveTo { target: t, cargo: Some("cube".into()) }),
            Just(SkillCall::Pick { object: "cup".into() }),
            Just(SkillCall::Pick { object: "cube".into() }),
            target.clone().prop_map(|t| SkillCall::Place { object: "cup".into(), target: t }),
            Just(SkillCall::Place { object: "cup".into(), target: Target::named("dog") }),
            Just(SkillCall::Sit),
            Just(SkillCall::Stand),
        ];
        (0..2usize, call)
    }

    fn arb_effect() -> impl Strategy<Value = ScriptEffect> {
        prop_oneof![
            Just(ScriptEffect::Detach { object: "cube".into() }),
            Just(ScriptEffect::Detach { object: "cup".into() }),
            Just(ScriptEffect::Attach { object: "cup".into(), parent: "dog".into() }),
            Just(ScriptEffect::Attach { object: "cube".into(), parent: "cup".into() }),
            (-4.0..4.0f64, -4.0..4.0f64)
                .prop_map(|(x, y)| ScriptEffect::Move { object: "cube".into(), position: Vec2::new(x, y) }),
        ]
    }

    fn drive(calls: &[(u64, usize, SkillCall)], effects: &[(u64, ScriptEffect)]) -> (WorldState, Vec<String>) {
        let mut entries: Vec<ScriptEntry> =
            effects.iter().map(|(t, e)| ScriptEntry { tick: *t, effect: e.clone() }).collect();
        entries.sort_by_key(|e| e.tick);
        let script = EventScript::new(entries).unwrap();
        let robots = ["dog", "arm"];
        let mut w = WorldState::new(&config(), WorldParams::default());
        let mut digests = Vec::new();
        for tick in 0..40u64 {
            let cmds: Vec<(RobotId, WorldCommand)> = calls
                .iter()
                .filter(|(t, _, _)| *t == tick)
                .map(|(_, r, c)| (robots[*r].to_string(), WorldCommand::Start(c.clone())))
                .collect();
            w.step(&cmds, &script);
            digests.push(w.digest());
        }
        (w, digests)
    }

    proptest! {
        #[test]
        fn attachment_stays_a_coincident_forest(
            calls in proptest::collection::vec((0..30u64, arb_call()), 0..12),
            effects in proptest::collection::vec((1..30u64, arb_effect()), 0..6),
        ) {
            let calls: Vec<(u64, usize, SkillCall)> = calls.into_iter().map(|(t, (r, c))| (t, r, c)).collect();
            let mut entries: Vec<ScriptEntry> =
                effects.iter().map(|(t, e)| ScriptEntry { tick: *t, effect: e.clone() }).collect();
            entries.sort_by_key(|e| e.tick);
            let script = EventScript::new(entries).unwrap();
            let robots = ["dog", "arm"];
            let mut w = WorldState::new(&config(), WorldParams::default());
            for tick in 0..40u64 {
                let cmds: Vec<(RobotId, WorldCommand)> = calls
                    .iter()
                    .filter(|(t, _, _)| *t == tick)
                    .map(|(_, r, c)| (robots[*r].to_string(), WorldCommand::Start(c.clone())))
                    .collect();
                w.step(&cmds, &script);
                prop_assert!(w.attachment_is_forest());
                prop_assert!(w.attachments_coincide());
            }
        }

        #[test]
        fn stepping_is_deterministic(
            calls in proptest::collection::vec((0..30u64, arb_call()), 0..12),
            effects in proptest::collection::vec((1..30u64, arb_effect()), 0..6),
        ) {
            let calls: Vec<(u64, usize, SkillCall)> = calls.into_iter().map(|(t, (r, c))| (t, r, c)).collect();
            let (_, a) = drive(&calls, &effects);
            let (_, b) = drive(&calls, &effects);
            prop_assert_eq!(a, b);
        }
    }
}
