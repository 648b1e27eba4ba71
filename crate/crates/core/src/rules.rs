//! Deterministic planner: capability-table allocation, scenario recipes,
//! structural class derivation, event recovery and human-input routing.

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::{Assignment, Observation, Plan, RobotId, ScenarioConfig, StepId, TaskClass, Vec2};
use crate::language::{canonical_step, parse_intent, Intent, Referent, Resolver};
use crate::manager::{DynamicContext, OpenStep};

/// Verb → capability tags required to carry it out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapabilityTable {
    verbs: BTreeMap<String, BTreeSet<String>>,
}

impl Default for CapabilityTable {
    fn default() -> Self {
        let rows: &[(&str, &[&str])] = &[
            ("wait", &[]),
            ("sit", &["sit"]),
            ("stand", &["sit"]),
            ("approach", &["navigate", "camera"]),
            ("find", &["camera"]),
            ("move", &["navigate"]),
            ("fly", &["fly"]),
            ("formation_carry", &["formation_carry"]),
            ("carry", &["carry"]),
            ("pick_place", &["pick", "place"]),
            ("pick", &["pick"]),
            ("place", &["place"]),
            ("push", &["push"]),
            ("survey", &["fly", "camera"]),
            ("deliver", &["carry", "place"]),
        ];
        Self {
            verbs: rows
                .iter()
                .map(|(v, caps)| (v.to_string(), caps.iter().map(|c| c.to_string()).collect()))
                .collect(),
        }
    }
}

impl CapabilityTable {
    /// Overlay scenario-specific rows.
    pub fn extend(&mut self, rows: &BTreeMap<String, BTreeSet<String>>) {
        for (k, v) in rows {
            self.verbs.insert(k.clone(), v.clone());
        }
    }

    pub fn caps_for_verb(&self, verb: &str) -> Option<&BTreeSet<String>> {
        self.verbs.get(verb)
    }

    /// Capabilities an instruction needs; `None` when no verb pattern
    /// matches.
    pub fn required(&self, instruction: &str) -> Option<BTreeSet<String>> {
        let intent = parse_intent(instruction)?;
        self.verbs.get(intent.verb()).cloned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeStep {
    pub id: String,
    #[serde(default)]
    pub assignee: Option<String>,
    pub instruction: String,
    #[serde(default)]
    pub capabilities: Option<BTreeSet<String>>,
    #[serde(default)]
    pub depends_on: BTreeSet<String>,
    #[serde(default)]
    pub sync_group: Option<String>,
}

/// Canned decomposition for commands the generic segmenter cannot express.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    /// Regex over the canonical command.
    pub when: String,
    #[serde(default)]
    pub classes: Option<BTreeSet<TaskClass>>,
    pub steps: Vec<RecipeStep>,
    /// Plan that replaces this command's open steps on an intent change.
    #[serde(default)]
    pub on_cancel: Vec<RecipeStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Appeared,
    Detached,
    Moved,
    LandedInside,
    LandedOutside,
}

impl ObservationKind {
    pub fn of(o: &Observation) -> Self {
        match o {
            Observation::Appeared { .. } => ObservationKind::Appeared,
            Observation::Detached { .. } => ObservationKind::Detached,
            Observation::Moved { .. } => ObservationKind::Moved,
            Observation::Landed { inside: true, .. } => ObservationKind::LandedInside,
            Observation::Landed { inside: false, .. } => ObservationKind::LandedOutside,
        }
    }
}

/// Recovery steps for an observed disturbance. Instruction templates may use
/// `{entity}`, `{container}`, `{from}` and `{position}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecipe {
    pub on: ObservationKind,
    /// Regex over the entity id.
    #[serde(default)]
    pub entity: Option<String>,
    pub steps: Vec<RecipeStep>,
    /// Canonical instructions of open steps the recipe supersedes.
    #[serde(default)]
    pub replaces: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioTable {
    pub capabilities: BTreeMap<String, BTreeSet<String>>,
    pub recipes: Vec<Recipe>,
    pub event_recipes: Vec<EventRecipe>,
}

impl ScenarioTable {
    pub fn capability_table(&self) -> CapabilityTable {
        let mut t = CapabilityTable::default();
        t.extend(&self.capabilities);
        t
    }

    pub fn recipe_for(&self, command: &str) -> Option<&Recipe> {
        let canon = canonical_step(command);
        self.recipes.iter().find(|r| Regex::new(&r.when).is_ok_and(|re| re.is_match(&canon)))
    }
}

/// How a human utterance is handled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "route", content = "command", rename_all = "snake_case")]
pub enum HumanRoute {
    NewCommand(String),
    IntentChange,
    HelpDone,
    Information,
}

const CANCEL_PHRASES: &[&str] =
    &["don t want", "dont want", "do not want", "cancel", "stop", "never mind", "changed my mind", "abort"];
const DONE_PHRASES: &[&str] = &["done", "i did it", "finished", "it is done", "its done", "completed"];

/// Keyword router. `history` is the list of earlier commands, oldest first.
pub fn route_human_input(
    text: &str,
    help_pending: bool,
    commands_so_far: &[String],
    planner: &RulePlanner,
) -> HumanRoute {
    let canon = format!(" {} ", canonical_step(text));
    let has = |p: &str| canon.contains(&format!(" {p} "));
    if help_pending && DONE_PHRASES.iter().any(|p| has(p)) {
        return HumanRoute::HelpDone;
    }
    if CANCEL_PHRASES.iter().any(|p| has(p)) {
        return HumanRoute::IntentChange;
    }
    if (has("repeat") || has("again")) && (has("earlier") || has("previous") || has("last") || has("again")) {
        return match commands_so_far.last() {
            Some(c) => HumanRoute::NewCommand(c.clone()),
            None => HumanRoute::Information,
        };
    }
    if planner.understands(text) {
        return HumanRoute::NewCommand(text.trim().to_string());
    }
    HumanRoute::Information
}

/// Split on top-level occurrences of `sep`, ignoring parenthesised spans.
fn split_top(text: &str, sep: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => depth += 1,
            b')' => depth -= 1,
            _ => {}
        }
        if depth == 0 && text.is_char_boundary(i) && text[i..].starts_with(sep) {
            out.push(text[start..i].to_string());
            i += sep.len();
            start = i;
            continue;
        }
        i += 1;
    }
    out.push(text[start..].to_string());
    out
}

fn tidy(s: &str) -> String {
    s.trim().trim_end_matches(['.', '!', '?', ',', ';']).trim().to_string()
}

#[derive(Debug, Clone, PartialEq)]
struct Clause {
    robot: Option<RobotId>,
    text: String,
    /// First clause after a "then".
    after_then: bool,
    phase: usize,
}

#[derive(Debug, Clone, Default)]
struct Draft {
    steps: Vec<Assignment>,
    uncovered: Vec<String>,
    tie_breaks: Vec<String>,
}

/// Deterministic planner backend.
#[derive(Debug, Clone)]
pub struct RulePlanner {
    config: ScenarioConfig,
    table: ScenarioTable,
    caps: CapabilityTable,
    resolver: Resolver,
}

impl RulePlanner {
    pub fn new(config: &ScenarioConfig, table: &ScenarioTable) -> Self {
        Self {
            config: config.clone(),
            table: table.clone(),
            caps: table.capability_table(),
            resolver: Resolver::new(config),
        }
    }

    pub fn capability_table(&self) -> &CapabilityTable {
        &self.caps
    }

    fn robot_prefix(&self, text: &str) -> (Option<RobotId>, String) {
        let re = Regex::new(r"^\s*([A-Za-z0-9_ \-]+?)\s*[,:]\s*(.+)$").expect("prefix regex");
        if let Some(c) = re.captures(text) {
            if let Some(Referent::Robot(r)) = self.resolver.resolve(&c[1]) {
                return (Some(r), tidy(&c[2]));
            }
        }
        (None, tidy(text))
    }

    /// Intent parses and every phrase it names resolves.
    fn clause_ok(&self, text: &str) -> bool {
        let (_, body) = self.robot_prefix(text);
        let Some(intent) = parse_intent(&body) else { return false };
        intent.mentions().iter().all(|m| {
            self.resolver.resolve(m).is_some() || matches!(intent, Intent::Deliver { .. } | Intent::Survey { .. })
        })
    }

    fn split_clause(&self, text: &str) -> Vec<String> {
        let text = tidy(text);
        if text.is_empty() {
            return vec![];
        }
        if self.clause_ok(&text) {
            return vec![text];
        }
        for sep in [" and ", ", "] {
            let parts = split_top(&text, sep);
            for k in 1..parts.len() {
                let left = parts[..k].join(sep);
                if self.clause_ok(&left) {
                    let right = parts[k..].join(sep);
                    let mut out = vec![tidy(&left)];
                    out.extend(self.split_clause(&right));
                    return out;
                }
            }
        }
        vec![text]
    }

    fn segment(&self, command: &str) -> Vec<Clause> {
        let mut out = Vec::new();
        let mut phase = 0;
        for sentence in split_top(command, ";").iter().flat_map(|s| split_top(s, ". ")) {
            let lowered = sentence.replace(", and then ", " then ").replace(", then ", " then ").replace(" and then ", " then ");
            for (i, piece) in split_top(&lowered, " then ").iter().enumerate() {
                let mut first = true;
                for c in self.split_clause(piece) {
                    let (robot, text) = self.robot_prefix(&c);
                    out.push(Clause { robot, text, after_then: i > 0 && first, phase });
                    first = false;
                }
                phase += 1;
            }
        }
        out
    }

    /// Whether a command would produce at least one parsed step.
    pub fn understands(&self, command: &str) -> bool {
        self.table.recipe_for(command).is_some()
            || self.segment(command).iter().any(|c| parse_intent(&c.text).is_some())
    }

    fn is_mobile(&self, r: &crate::domain::RobotSpec) -> bool {
        r.has("navigate") || r.has("fly")
    }

    /// Fixed robots can only serve instructions whose free-standing objects
    /// and locations lie within reach.
    fn within_station(&self, robot: &crate::domain::RobotSpec, instruction: &str) -> bool {
        if self.is_mobile(robot) {
            return true;
        }
        let here = robot.initial_pose.position;
        let Some(intent) = parse_intent(instruction) else { return true };
        intent.mentions().iter().all(|m| {
            let p: Option<Vec2> = match self.resolver.resolve(m) {
                Some(Referent::Object(o)) => {
                    self.config.object(&o).filter(|o| o.attached_to.is_none()).map(|o| o.position)
                }
                Some(Referent::Location(l)) => self.config.locations.get(&l).copied(),
                Some(Referent::Coord(c)) => Some(c),
                _ => None,
            };
            p.is_none_or(|p| p.distance(here) <= robot.reach + 0.05)
        })
    }

    /// Lexicographically first robot covering `caps`, preferring robots
    /// without work in `busy`.
    fn allocate(
        &self,
        caps: &BTreeSet<String>,
        instruction: &str,
        busy: &BTreeSet<RobotId>,
        ties: &mut Vec<String>,
    ) -> Option<RobotId> {
        let capable: Vec<&crate::domain::RobotSpec> = self
            .config
            .robots_sorted()
            .into_iter()
            .filter(|r| r.covers(caps) && self.within_station(r, instruction))
            .collect();
        let idle: Vec<&&crate::domain::RobotSpec> = capable.iter().filter(|r| !busy.contains(&r.id)).collect();
        let pick = idle.first().map(|r| r.id.clone()).or_else(|| capable.first().map(|r| r.id.clone()))?;
        if idle.len() > 1 {
            ties.push(format!(
                "tie for \"{instruction}\" between {}; chose {pick}",
                idle.iter().map(|r| r.id.as_str()).collect::<Vec<_>>().join(", ")
            ));
        }
        Some(pick)
    }

    fn caps_of(&self, instruction: &str, explicit: Option<&BTreeSet<String>>) -> Option<BTreeSet<String>> {
        explicit.cloned().or_else(|| self.caps.required(instruction))
    }

    fn entities_in(&self, text: &str) -> BTreeSet<String> {
        let mut ids: BTreeSet<String> = self.resolver.mentioned_ids(text).into_iter().collect();
        // robots are actors, not shared resources
        ids.retain(|id| self.config.robot(id).is_none());
        ids
    }

    fn placement_robot(&self, intent: &Intent) -> Option<(RobotId, String)> {
        let t = intent.placement_target()?;
        match self.resolver.resolve(t) {
            Some(Referent::Robot(r)) => {
                let posture = self.config.robot(&r)?.required_posture_for_loading()?;
                Some((r, posture))
            }
            _ => None,
        }
    }

    fn draft_command(&self, command: &str, busy: &BTreeSet<RobotId>) -> Draft {
        let mut d = Draft::default();
        let mut assigned: BTreeSet<RobotId> = busy.clone();
        let mut n = 0usize;
        let next_id = |n: &mut usize| {
            *n += 1;
            format!("s{n}")
        };
        let mut group_n = 0usize;
        let mut prev_phase_steps: Vec<StepId> = Vec::new();
        let mut phase_steps: Vec<StepId> = Vec::new();
        let mut cur_phase = usize::MAX;
        let mut last_by_entity: BTreeMap<String, StepId> = BTreeMap::new();
        let mut last_by_robot: BTreeMap<String, StepId> = BTreeMap::new();

        for clause in self.segment(command) {
            if clause.phase != cur_phase {
                if cur_phase != usize::MAX {
                    prev_phase_steps = std::mem::take(&mut phase_steps);
                }
                cur_phase = clause.phase;
            }
            let Some(intent) = parse_intent(&clause.text) else {
                d.uncovered.push(clause.text.clone());
                continue;
            };
            let Some(caps) = self.caps_of(&clause.text, None) else {
                d.uncovered.push(clause.text.clone());
                continue;
            };
            let mut deps: BTreeSet<StepId> = BTreeSet::new();
            if clause.after_then {
                deps.extend(prev_phase_steps.iter().cloned());
            }
            let entities = self.entities_in(&clause.text);
            for e in &entities {
                if let Some(s) = last_by_entity.get(e) {
                    deps.insert(s.clone());
                }
            }

            if let Intent::FormationCarry { .. } = intent {
                let members: Vec<RobotId> =
                    self.config.robots_sorted().into_iter().filter(|r| r.covers(&caps)).map(|r| r.id.clone()).collect();
                if members.len() < 2 {
                    d.uncovered.push(clause.text.clone());
                    continue;
                }
                for m in &members {
                    if let Some(s) = last_by_robot.get(m) {
                        deps.insert(s.clone());
                    }
                }
                group_n += 1;
                let group = format!("g{group_n}");
                let mut ids = Vec::new();
                for m in &members {
                    let id = next_id(&mut n);
                    d.steps.push(Assignment {
                        step_id: id.clone(),
                        assignee: m.clone(),
                        instruction: clause.text.clone(),
                        required_capabilities: caps.clone(),
                        depends_on: deps.clone(),
                        sync_group: Some(group.clone()),
                    });
                    last_by_robot.insert(m.clone(), id.clone());
                    assigned.insert(m.clone());
                    ids.push(id);
                }
                let last = ids.last().cloned().expect("two or more members");
                for e in entities {
                    last_by_entity.insert(e, last.clone());
                }
                phase_steps.extend(ids);
                continue;
            }

            let explicit = clause.robot.as_ref().filter(|r| {
                self.config.robot(r).is_some_and(|spec| spec.covers(&caps) && self.within_station(spec, &clause.text))
            });
            let assignee = match explicit {
                Some(r) => Some(r.clone()),
                None => self.allocate(&caps, &clause.text, &assigned, &mut d.tie_breaks),
            };
            let assignee = match assignee.or_else(|| self.config.humans.first().cloned()) {
                Some(a) => a,
                None => {
                    d.uncovered.push(clause.text.clone());
                    continue;
                }
            };
            if let Some(s) = last_by_robot.get(&assignee) {
                deps.insert(s.clone());
            }

            // loading onto a robot that must change posture first
            let posture_guard = self.placement_robot(&intent);
            if let Some((carrier, _)) = &posture_guard {
                let sit = next_id(&mut n);
                let mut sit_deps = BTreeSet::new();
                if let Some(s) = last_by_robot.get(carrier) {
                    sit_deps.insert(s.clone());
                }
                d.steps.push(Assignment {
                    step_id: sit.clone(),
                    assignee: carrier.clone(),
                    instruction: "sit".into(),
                    required_capabilities: self.caps.caps_for_verb("sit").cloned().unwrap_or_default(),
                    depends_on: sit_deps,
                    sync_group: None,
                });
                deps.insert(sit.clone());
                phase_steps.push(sit);
            }
            let id = next_id(&mut n);
            d.steps.push(Assignment {
                step_id: id.clone(),
                assignee: assignee.clone(),
                instruction: clause.text.clone(),
                required_capabilities: caps,
                depends_on: deps,
                sync_group: None,
            });
            assigned.insert(assignee.clone());
            last_by_robot.insert(assignee, id.clone());
            for e in entities {
                last_by_entity.insert(e, id.clone());
            }
            phase_steps.push(id.clone());
            if let Some((carrier, _)) = posture_guard {
                let stand = next_id(&mut n);
                d.steps.push(Assignment {
                    step_id: stand.clone(),
                    assignee: carrier.clone(),
                    instruction: "stand".into(),
                    required_capabilities: self.caps.caps_for_verb("stand").cloned().unwrap_or_default(),
                    depends_on: BTreeSet::from([id]),
                    sync_group: None,
                });
                assigned.insert(carrier.clone());
                last_by_robot.insert(carrier, stand.clone());
                phase_steps.push(stand);
            }
        }
        d
    }

    /// Instantiate recipe steps with ids `prefix` + local id.
    fn instantiate(
        &self,
        steps: &[RecipeStep],
        vars: &BTreeMap<&str, String>,
        busy: &BTreeSet<RobotId>,
        d: &mut Draft,
    ) -> Vec<Assignment> {
        let fill = |s: &str| {
            let mut s = s.to_string();
            for (k, v) in vars {
                s = s.replace(&format!("{{{k}}}"), v);
            }
            s
        };
        let mut assigned = busy.clone();
        let mut out = Vec::new();
        for rs in steps {
            let instruction = fill(&rs.instruction);
            let caps = self.caps_of(&instruction, rs.capabilities.as_ref()).unwrap_or_default();
            let assignee = match &rs.assignee {
                Some(a) => Some(fill(a)),
                None => self
                    .allocate(&caps, &instruction, &assigned, &mut d.tie_breaks)
                    .or_else(|| self.config.humans.first().cloned()),
            };
            let Some(assignee) = assignee else {
                d.uncovered.push(instruction);
                continue;
            };
            assigned.insert(assignee.clone());
            out.push(Assignment {
                step_id: rs.id.clone(),
                assignee,
                instruction,
                required_capabilities: caps,
                depends_on: rs.depends_on.clone(),
                sync_group: rs.sync_group.clone(),
            });
        }
        out
    }

    fn finish(&self, plan_id: &str, source: &str, d: Draft, classes: Option<BTreeSet<TaskClass>>) -> Plan {
        for t in &d.tie_breaks {
            tracing::info!(target: "planner", "{t}");
        }
        if !d.uncovered.is_empty() {
            tracing::info!(target: "planner", uncovered = ?d.uncovered, "no agent covers step");
            return Plan {
                plan_id: plan_id.into(),
                classes: BTreeSet::from([TaskClass::Infeasible]),
                steps: vec![],
                source_command_id: source.into(),
            };
        }
        let classes = classes.unwrap_or_else(|| derive_classes(&d.steps));
        Plan { plan_id: plan_id.into(), classes, steps: d.steps, source_command_id: source.into() }
    }

    /// Plan a fresh command. `busy` robots already have open work.
    pub fn plan_command(&self, plan_id: &str, command: &str, busy: &BTreeSet<RobotId>) -> Plan {
        if let Some(recipe) = self.table.recipe_for(command) {
            let mut d = Draft::default();
            d.steps = self.instantiate(&recipe.steps, &BTreeMap::new(), busy, &mut d);
            return self.finish(plan_id, command, d, recipe.classes.clone());
        }
        let d = self.draft_command(command, busy);
        self.finish(plan_id, command, d, None)
    }

    /// Replan over the open steps, folding in events or an intent change.
    pub fn replan(&self, plan_id: &str, ctx: &DynamicContext) -> Plan {
        let mut d = Draft::default();
        let mut carry: Vec<OpenStep> = ctx.open_steps.clone();
        // replacement map: dropped open step → step that takes over its dependents
        let mut replaced: BTreeMap<StepId, Option<StepId>> = BTreeMap::new();
        let mut front: Vec<Assignment> = Vec::new();
        let mut back: Vec<Assignment> = Vec::new();
        let mut n = 0usize;
        let fresh = |prefix: &str, n: &mut usize| {
            *n += 1;
            format!("{prefix}{n}")
        };

        if ctx.intent_change.is_some() {
            // the most recent command with open steps is the one being revoked
            let target = ctx.open_steps.iter().map(|s| s.command.clone()).max_by_key(|c| {
                ctx.commands.iter().rposition(|x| x == c).unwrap_or(0)
            });
            if let Some(cmd) = target {
                let recipe = self.table.recipe_for(&cmd);
                carry.retain(|s| {
                    if s.command == cmd {
                        replaced.insert(s.assignment.step_id.clone(), None);
                        false
                    } else {
                        true
                    }
                });
                if let Some(r) = recipe {
                    let busy = BTreeSet::new();
                    let steps = self.instantiate(&r.on_cancel, &BTreeMap::new(), &busy, &mut d);
                    let ids: BTreeMap<String, String> =
                        steps.iter().map(|s| (s.step_id.clone(), fresh("c", &mut n))).collect();
                    for mut s in steps {
                        s.step_id = ids[&s.step_id].clone();
                        s.depends_on = s.depends_on.iter().filter_map(|x| ids.get(x).cloned()).collect();
                        back.push(s);
                    }
                }
            }
        }

        // several cameras may report one disturbance
        let mut handled: BTreeSet<(ObservationKind, String)> = BTreeSet::new();
        for ev in &ctx.events {
            let Some(obs) = &ev.observation else { continue };
            let kind = ObservationKind::of(obs);
            if !handled.insert((kind, obs.entity().to_string())) {
                continue;
            }
            let recipe = self.table.event_recipes.iter().find(|r| {
                r.on == kind && r.entity.as_deref().is_none_or(|p| Regex::new(p).is_ok_and(|re| re.is_match(obs.entity())))
            });
            if let Some(r) = recipe {
                let vars = event_vars(obs, &self.config);
                let busy = BTreeSet::new();
                let steps = self.instantiate(&r.steps, &vars, &busy, &mut d);
                let ids: BTreeMap<String, String> =
                    steps.iter().map(|s| (s.step_id.clone(), fresh("e", &mut n))).collect();
                let replaces: BTreeSet<String> = r
                    .replaces
                    .iter()
                    .map(|p| {
                        let mut s = p.clone();
                        for (k, v) in &vars {
                            s = s.replace(&format!("{{{k}}}"), v);
                        }
                        canonical_step(&s)
                    })
                    .collect();
                let mut inherited: BTreeSet<StepId> = BTreeSet::new();
                let last = steps.last().map(|s| ids[&s.step_id].clone());
                carry.retain(|s| {
                    if replaces.contains(&canonical_step(&s.assignment.instruction)) {
                        inherited.extend(s.assignment.depends_on.iter().cloned());
                        replaced.insert(s.assignment.step_id.clone(), last.clone());
                        false
                    } else {
                        true
                    }
                });
                for mut s in steps {
                    let roots = s.depends_on.is_empty();
                    s.step_id = ids[&s.step_id].clone();
                    s.depends_on = s.depends_on.iter().filter_map(|x| ids.get(x).cloned()).collect();
                    if roots {
                        s.depends_on.extend(inherited.iter().cloned());
                    }
                    back.push(s);
                }
            } else if let Observation::Detached { entity, from, .. } = obs {
                if self.config.robot(from).is_some() {
                    front.extend(self.drop_recovery(entity, from, &mut n, &mut d));
                }
            }
        }

        // carry-overs follow recovery steps that share their robot or object
        let recovery_last_robot: BTreeMap<String, StepId> =
            front.iter().map(|s| (s.assignee.clone(), s.step_id.clone())).collect();
        let recovery_last = front.last().map(|s| s.step_id.clone());
        let recovery_entities: BTreeSet<String> = front.iter().flat_map(|s| self.entities_in(&s.instruction)).collect();
        let kept: BTreeSet<StepId> = carry.iter().map(|s| s.assignment.step_id.clone()).collect();
        let mut plan_steps = front.clone();
        for s in &carry {
            let mut a = s.assignment.clone();
            let mut deps: BTreeSet<StepId> = BTreeSet::new();
            for dep in &a.depends_on {
                if kept.contains(dep) {
                    deps.insert(dep.clone());
                } else if let Some(Some(r)) = replaced.get(dep) {
                    deps.insert(r.clone());
                }
            }
            let touches = self.entities_in(&a.instruction).iter().any(|e| recovery_entities.contains(e));
            if touches {
                deps.extend(recovery_last.clone());
            } else if let Some(r) = recovery_last_robot.get(&a.assignee) {
                deps.insert(r.clone());
            }
            a.depends_on = deps;
            plan_steps.push(a);
        }
        // appended steps queue behind open work of the same robot
        let mut last_of: BTreeMap<String, StepId> = BTreeMap::new();
        for s in &plan_steps {
            last_of.insert(s.assignee.clone(), s.step_id.clone());
        }
        for mut s in back {
            if s.depends_on.is_empty() {
                if let Some(prev) = last_of.get(&s.assignee) {
                    s.depends_on.insert(prev.clone());
                }
            }
            last_of.insert(s.assignee.clone(), s.step_id.clone());
            plan_steps.push(s);
        }
        // sync members must agree on prerequisites
        let mut group_deps: BTreeMap<String, BTreeSet<StepId>> = BTreeMap::new();
        for s in &plan_steps {
            if let Some(g) = &s.sync_group {
                group_deps.entry(g.clone()).or_default().extend(s.depends_on.iter().cloned());
            }
        }
        for s in &mut plan_steps {
            if let Some(g) = &s.sync_group {
                s.depends_on = group_deps[g].clone();
            }
        }
        let (steps, renamed) = renumber(plan_steps);
        for (old, new) in &renamed {
            tracing::debug!(target: "planner", "{old} -> {new}");
        }
        d.steps = steps;
        let source = ctx
            .events
            .first()
            .map(|e| e.event_id.clone())
            .or_else(|| ctx.intent_change.clone())
            .unwrap_or_else(|| "replan".into());
        self.finish(plan_id, &source, d, None)
    }

    /// Pick-and-replace sequence for an object that fell off `owner`.
    fn drop_recovery(
        &self,
        entity: &str,
        owner: &str,
        n: &mut usize,
        d: &mut Draft,
    ) -> Vec<Assignment> {
        let name = self.config.object(entity).map(|o| o.kind.clone()).filter(|k| !k.is_empty()).unwrap_or_else(|| entity.replace('_', " "));
        let owner_busy: BTreeSet<RobotId> = BTreeSet::from([owner.to_string()]);
        let pick_caps = self.caps.caps_for_verb("pick_place").cloned().unwrap_or_default();
        let Some(picker) = self.allocate(&pick_caps, &format!("pick up the {name}"), &owner_busy, &mut d.tie_breaks)
        else {
            d.uncovered.push(format!("pick up the {name}"));
            return vec![];
        };
        let mut next = || {
            *n += 1;
            format!("r{n}")
        };
        let cap = |v: &str| self.caps.caps_for_verb(v).cloned().unwrap_or_default();
        let mut out = Vec::new();
        let pick = next();
        out.push(Assignment {
            step_id: pick.clone(),
            assignee: picker.clone(),
            instruction: format!("pick up the {name}"),
            required_capabilities: cap("pick"),
            depends_on: BTreeSet::new(),
            sync_group: None,
        });
        let posture = self.config.robot(owner).and_then(|r| r.required_posture_for_loading());
        let mut place_deps = BTreeSet::from([pick]);
        if posture.is_some() {
            let sit = next();
            out.push(Assignment {
                step_id: sit.clone(),
                assignee: owner.into(),
                instruction: "sit".into(),
                required_capabilities: cap("sit"),
                depends_on: BTreeSet::new(),
                sync_group: None,
            });
            place_deps.insert(sit);
        }
        let place = next();
        out.push(Assignment {
            step_id: place.clone(),
            assignee: picker,
            instruction: format!("place the {name} on the {owner}"),
            required_capabilities: cap("place"),
            depends_on: place_deps,
            sync_group: None,
        });
        if posture.is_some() {
            out.push(Assignment {
                step_id: next(),
                assignee: owner.into(),
                instruction: "stand".into(),
                required_capabilities: cap("stand"),
                depends_on: BTreeSet::from([place]),
                sync_group: None,
            });
        }
        out
    }
}

fn event_vars(obs: &Observation, config: &ScenarioConfig) -> BTreeMap<&'static str, String> {
    let name = |id: &str| config.object(id).map(|o| o.kind.clone()).filter(|k| !k.is_empty()).unwrap_or_else(|| id.replace('_', " "));
    let mut v = BTreeMap::new();
    v.insert("entity", name(obs.entity()));
    v.insert("entity_id", obs.entity().to_string());
    v.insert("position", obs.position().to_string());
    match obs {
        Observation::Detached { from, .. } => {
            v.insert("from", from.clone());
        }
        Observation::Landed { container, .. } => {
            v.insert("container", name(container));
        }
        _ => {}
    }
    v
}

/// Give steps dense ids `s1..sN` and sync groups `g1..gK` in list order.
fn renumber(steps: Vec<Assignment>) -> (Vec<Assignment>, Vec<(StepId, StepId)>) {
    let map: BTreeMap<StepId, StepId> =
        steps.iter().enumerate().map(|(i, s)| (s.step_id.clone(), format!("s{}", i + 1))).collect();
    let mut groups: BTreeMap<String, String> = BTreeMap::new();
    for g in steps.iter().filter_map(|s| s.sync_group.as_ref()) {
        if !groups.contains_key(g) {
            let name = format!("g{}", groups.len() + 1);
            groups.insert(g.clone(), name);
        }
    }
    let out = steps
        .into_iter()
        .map(|mut s| {
            s.step_id = map[&s.step_id].clone();
            s.depends_on = s.depends_on.iter().filter_map(|d| map.get(d).cloned()).collect();
            s.sync_group = s.sync_group.map(|g| groups[&g].clone());
            s
        })
        .collect();
    (out, map.into_iter().collect())
}

/// Classes from plan structure: edges mean SEQUENTIAL, sync groups mean
/// COORDINATED, neither means INDEPENDENT.
pub fn derive_classes(steps: &[Assignment]) -> BTreeSet<TaskClass> {
    let mut c = BTreeSet::new();
    if steps.iter().any(|s| !s.depends_on.is_empty()) {
        c.insert(TaskClass::Sequential);
    }
    if steps.iter().any(|s| s.sync_group.is_some()) {
        c.insert(TaskClass::Coordinated);
    }
    if c.is_empty() {
        c.insert(TaskClass::Independent);
    }
    c
}
