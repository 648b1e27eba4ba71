//! Plan-quality metrics and the planning / replanning evaluation protocols.
//!
//! Step identity for IoU and allocation is `(assignee, canonical_step)`.
//! TA, TC and Correctness are binary; IoU and Exec are ratios.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bus::Payload;
use crate::domain::{Plan, ScenarioConfig, TaskClass};
use crate::error::{CoreError, Result};
use crate::language::canonical_step;
use crate::manager::{assemble_context, DynamicContext, StaticRules};
use crate::planner::{validate_plan, BackendError, PlanRequest, Planner, PlannerError, RuleBackend};
use crate::rules::{HumanRoute, ScenarioTable};
use crate::runtime::{RunOutcome, Runtime, Scenario};
use crate::world::{EventScript, Predicate, ScriptEffect, ScriptEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanExtension {
    /// What happens, in words; for reports.
    pub event_text: String,
    /// Replaces the scenario script for the replay; must issue the prompt.
    #[serde(default)]
    pub script: Option<EventScript>,
    pub accepted_classes: Vec<BTreeSet<TaskClass>>,
    pub accepted: Vec<Plan>,
    pub goals: Vec<Predicate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    pub id: String,
    pub scenario: String,
    pub prompt: String,
    pub accepted_classes: Vec<BTreeSet<TaskClass>>,
    pub ground_truth: Vec<Plan>,
    /// Goals checked when the plan is executed; empty means MATCH mode.
    #[serde(default)]
    pub goals: Vec<Predicate>,
    #[serde(default)]
    pub paraphrases: Vec<String>,
    #[serde(default)]
    pub replan: Option<ReplanExtension>,
    #[serde(default)]
    pub tick_budget: Option<u64>,
}

impl BenchmarkCase {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.ground_truth.is_empty() {
            out.push(format!("{}: no ground-truth plan", self.id));
        }
        if self.accepted_classes.is_empty() || self.accepted_classes.iter().any(BTreeSet::is_empty) {
            out.push(format!("{}: accepted classes empty", self.id));
        }
        if let Some(r) = &self.replan {
            if r.accepted.is_empty() || r.accepted_classes.is_empty() {
                out.push(format!("{}: replan extension lacks accepted plans or classes", self.id));
            }
        }
        out
    }
}

/// Cases plus the scenarios they reference.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: Vec<BenchmarkCase>,
    pub scenarios: BTreeMap<String, Scenario>,
}

impl Dataset {
    /// `dir/scenarios/*.json` plus the named cases file in `dir`.
    pub fn load(dir: &Path, cases_file: &str) -> Result<Self> {
        let mut scenarios = BTreeMap::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir.join("scenarios"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let s = Scenario::load(&p)?;
            scenarios.insert(s.config.name.clone(), s);
        }
        let cases: Vec<BenchmarkCase> = serde_json::from_str(&std::fs::read_to_string(dir.join(cases_file))?)?;
        let d = Self { cases, scenarios };
        let problems = d.validate();
        if !problems.is_empty() {
            return Err(CoreError::Invalid(problems.join("; ")));
        }
        Ok(d)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out: Vec<String> = self.cases.iter().flat_map(BenchmarkCase::validate).collect();
        for c in &self.cases {
            if !self.scenarios.contains_key(&c.scenario) {
                out.push(format!("{}: unknown scenario {}", c.id, c.scenario));
            }
        }
        out
    }
}

type StepKey = (String, String);

fn step_set(plan: &Plan) -> BTreeSet<StepKey> {
    plan.steps.iter().map(|s| (s.assignee.clone(), canonical_step(&s.instruction))).collect()
}

/// |A ∩ B| / |A ∪ B|; two empty sets count as identical.
pub fn iou_sets<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn score_iou(plan: &Plan, accepted: &[Plan]) -> f64 {
    let p = step_set(plan);
    accepted.iter().map(|g| iou_sets(&p, &step_set(g))).fold(0.0, f64::max)
}

pub fn score_tc(plan: &Plan, accepted_classes: &[BTreeSet<TaskClass>]) -> u8 {
    u8::from(accepted_classes.contains(&plan.classes))
}

fn covers(config: &ScenarioConfig, table: &ScenarioTable, assignee: &str, instruction: &str, explicit: &BTreeSet<String>) -> bool {
    if config.is_human(assignee) {
        return true;
    }
    let Some(robot) = config.robot(assignee) else { return false };
    let mut need = explicit.clone();
    need.extend(table.capability_table().required(instruction).unwrap_or_default());
    robot.covers(need.iter())
}

/// 1 iff some accepted plan has the same assignee multiset and each of its
/// steps appears in `plan` with a capable assignee.
pub fn score_ta(plan: &Plan, accepted: &[Plan], config: &ScenarioConfig, table: &ScenarioTable) -> u8 {
    fn multiset(p: &Plan) -> Vec<&str> {
        let mut v: Vec<&str> = p.steps.iter().map(|s| s.assignee.as_str()).collect();
        v.sort_unstable();
        v
    }
    let mine = multiset(plan);
    let ok = accepted.iter().any(|g| {
        multiset(g) == mine
            && g.steps.iter().all(|gs| {
                let want = canonical_step(&gs.instruction);
                plan.steps.iter().any(|ps| {
                    canonical_step(&ps.instruction) == want
                        && covers(config, table, &ps.assignee, &ps.instruction, &ps.required_capabilities)
                })
            })
    });
    u8::from(ok)
}

/// Share of steps with no executability violation. Empty plans score 0.
pub fn score_exec(plan: &Plan, config: &ScenarioConfig, table: &ScenarioTable) -> f64 {
    if plan.steps.is_empty() {
        tracing::warn!(plan = %plan.plan_id, "empty plan scores zero executability");
        return 0.0;
    }
    let cap = table.capability_table();
    let bad: BTreeSet<String> = validate_plan(plan, config, &cap).into_iter().map(|v| v.step_id).collect();
    let good = plan.steps.iter().filter(|s| !bad.contains(&s.step_id)).count();
    good as f64 / plan.steps.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CorrectnessMode {
    Executed,
    Match,
}

/// Returns a fixed plan for one command. Any later plan request fails so a
/// faulty plan cannot be repaired by replanning; routing defers to rules.
struct FixedPlanner {
    plan: Plan,
    command: String,
    fallback: RuleBackend,
}

impl Planner for FixedPlanner {
    fn id(&self) -> String {
        "fixed".into()
    }

    fn plan(&mut self, req: &PlanRequest<'_>) -> std::result::Result<Plan, PlannerError> {
        match &req.command {
            Some(c) if c == &self.command => {
                let mut p = self.plan.clone();
                p.plan_id = req.plan_id.clone();
                Ok(p)
            }
            _ => Err(PlannerError::PlannerFailure("fixed plan: no replanning".into())),
        }
    }

    fn route_input(&mut self, text: &str, help_pending: bool, commands: &[String]) -> HumanRoute {
        if text == self.command && !commands.iter().any(|c| c == text) {
            return HumanRoute::NewCommand(text.to_string());
        }
        self.fallback.route_input(text, help_pending, commands)
    }
}

/// Execute `plan` for `prompt` in the scenario's world under nominal
/// dynamics: no scripted events, no push offset, no pose noise.
pub fn execute_plan(plan: &Plan, prompt: &str, scenario: &Scenario, goals: &[Predicate], budget: Option<u64>) -> (bool, String) {
    let mut s = scenario.clone();
    s.script = EventScript::new(vec![ScriptEntry {
        tick: 1,
        effect: ScriptEffect::HumanUtterance { from: "user".into(), text: prompt.into() },
    }])
    .expect("single entry");
    s.goals = goals.to_vec();
    s.world.push_offset = [0.0, 0.0];
    s.world.pose_noise = 0.0;
    if let Some(b) = budget {
        s.tick_budget = b;
    }
    let planner = FixedPlanner {
        plan: plan.clone(),
        command: prompt.into(),
        fallback: RuleBackend::new(&s.config, &s.planning),
    };
    let mut rt = match Runtime::new(s, Box::new(planner), StaticRules::default()) {
        Ok(rt) => rt,
        Err(e) => return (false, e.to_string()),
    };
    let r = rt.run();
    match (r.outcome, r.goals_met()) {
        (RunOutcome::BudgetExceeded, _) => (false, format!("tick budget exhausted at {}", r.ticks)),
        (_, true) => (true, String::new()),
        (_, false) => (false, "goal predicates unmet".into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RowStatus {
    Scored,
    Skipped,
    Gated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub case_id: String,
    pub scenario: String,
    /// Paraphrase index; `None` for the canonical prompt.
    pub variant: Option<usize>,
    pub prompt: String,
    pub iteration: u32,
    pub backend: String,
    pub status: RowStatus,
    pub ta: u8,
    pub tc: u8,
    pub iou: f64,
    pub exec: f64,
    pub correctness: u8,
    pub mode: CorrectnessMode,
    pub reason: Option<String>,
}

impl ScoreRow {
    fn empty(case: &BenchmarkCase, prompt: &str, variant: Option<usize>, iteration: u32, backend: &str) -> Self {
        Self {
            case_id: case.id.clone(),
            scenario: case.scenario.clone(),
            variant,
            prompt: prompt.into(),
            iteration,
            backend: backend.into(),
            status: RowStatus::Scored,
            ta: 0,
            tc: 0,
            iou: 0.0,
            exec: 0.0,
            correctness: 0,
            mode: if case.goals.is_empty() { CorrectnessMode::Match } else { CorrectnessMode::Executed },
            reason: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub n: usize,
    pub ta: f64,
    pub tc: f64,
    pub iou: f64,
    pub exec: f64,
    pub correctness: f64,
}

impl Means {
    fn of<'a>(rows: impl Iterator<Item = &'a ScoreRow>) -> Self {
        let mut m = Means::default();
        for r in rows.filter(|r| r.status == RowStatus::Scored) {
            m.n += 1;
            m.ta += f64::from(r.ta);
            m.tc += f64::from(r.tc);
            m.iou += r.iou;
            m.exec += r.exec;
            m.correctness += f64::from(r.correctness);
        }
        if m.n > 0 {
            let n = m.n as f64;
            m.ta /= n;
            m.tc /= n;
            m.iou /= n;
            m.exec /= n;
            m.correctness /= n;
        }
        m
    }

    fn metrics(&self) -> [(&'static str, f64); 5] {
        [("TA", self.ta), ("TC", self.tc), ("IoU", self.iou), ("Exec", self.exec), ("Correctness", self.correctness)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub backend: String,
    pub iterations: u32,
    pub rows: Vec<ScoreRow>,
    pub per_scenario: BTreeMap<String, Means>,
    /// Canonical and paraphrase rows grouped by case.
    pub per_case: BTreeMap<String, Means>,
    pub overall: Means,
    pub attempted: usize,
    pub scored: usize,
    pub skipped: usize,
    pub gated: usize,
}

impl Report {
    pub fn from_rows(backend: &str, iterations: u32, rows: Vec<ScoreRow>) -> Self {
        let mut scen: BTreeSet<&str> = BTreeSet::new();
        let mut cases: BTreeSet<&str> = BTreeSet::new();
        for r in &rows {
            scen.insert(&r.scenario);
            cases.insert(&r.case_id);
        }
        let per_scenario = scen
            .iter()
            .map(|s| (s.to_string(), Means::of(rows.iter().filter(|r| r.scenario == *s))))
            .collect();
        let per_case = cases
            .iter()
            .map(|c| (c.to_string(), Means::of(rows.iter().filter(|r| r.case_id == *c))))
            .collect();
        let count = |st: RowStatus| rows.iter().filter(|r| r.status == st).count();
        Self {
            backend: backend.into(),
            iterations,
            overall: Means::of(rows.iter()),
            per_scenario,
            per_case,
            attempted: rows.len(),
            scored: count(RowStatus::Scored),
            skipped: count(RowStatus::Skipped),
            gated: count(RowStatus::Gated),
            rows,
        }
    }

    /// Metrics whose overall mean falls below `floor`.
    pub fn below_floor(&self, floor: f64) -> Vec<String> {
        if self.scored == 0 {
            return Vec::new();
        }
        self.overall
            .metrics()
            .iter()
            .filter(|(_, v)| *v + 1e-12 < floor)
            .map(|(k, v)| format!("{k} mean {v:.3} below floor {floor:.3}"))
            .collect()
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "backend: {}  iterations: {}", self.backend, self.iterations);
        let _ = writeln!(out, "{:<20} {:>4} {:>6} {:>6} {:>6} {:>6} {:>12}", "scenario", "n", "TA", "TC", "IoU", "Exec", "Correctness");
        let row = |out: &mut String, name: &str, m: &Means| {
            let _ = writeln!(
                out,
                "{:<20} {:>4} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>12.3}",
                name, m.n, m.ta, m.tc, m.iou, m.exec, m.correctness
            );
        };
        for (s, m) in &self.per_scenario {
            row(&mut out, s, m);
        }
        row(&mut out, "overall", &self.overall);
        let _ = writeln!(
            out,
            "attempted {}  scored {}  skipped {}  gated {}",
            self.attempted, self.scored, self.skipped, self.gated
        );
        for r in self.rows.iter().filter(|r| r.status != RowStatus::Scored) {
            let _ = writeln!(out, "  {:?} {} #{}: {}", r.status, r.case_id, r.iteration, r.reason.as_deref().unwrap_or(""));
        }
        out
    }
}

/// Builds a fresh planner for a scenario.
pub type PlannerFactory<'a> = dyn Fn(&Scenario) -> std::result::Result<Box<dyn Planner>, BackendError> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub iterations: u32,
    pub paraphrases: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { iterations: 5, paraphrases: false }
    }
}

fn initial_context(config: &ScenarioConfig, command: &str) -> DynamicContext {
    DynamicContext {
        commands: vec![command.to_string()],
        command: Some(command.to_string()),
        robots: config
            .robots
            .iter()
            .map(|r| {
                (
                    r.id.clone(),
                    crate::domain::RobotStatus {
                        posture: Some(r.initial_pose.posture.clone()),
                        position: r.initial_pose.position,
                        busy: false,
                    },
                )
            })
            .collect(),
        humans: config.humans.clone(),
        ..DynamicContext::default()
    }
}

/// Ask `planner` for a plan for `prompt` from the scenario's initial state.
pub fn plan_prompt(planner: &mut dyn Planner, scenario: &Scenario, prompt: &str) -> std::result::Result<Plan, PlannerError> {
    let ctx = initial_context(&scenario.config, prompt);
    let text = assemble_context(&StaticRules::default(), &ctx, &scenario.config);
    let req = PlanRequest {
        plan_id: "p1".into(),
        prompt: text,
        context: &ctx,
        command: Some(prompt.to_string()),
        busy: BTreeSet::new(),
    };
    planner.plan(&req)
}

fn score_plan(row: &mut ScoreRow, plan: &Plan, case: &BenchmarkCase, scenario: &Scenario, prompt: &str) {
    row.ta = score_ta(plan, &case.ground_truth, &scenario.config, &scenario.planning);
    row.tc = score_tc(plan, &case.accepted_classes);
    row.iou = score_iou(plan, &case.ground_truth);
    row.exec = score_exec(plan, &scenario.config, &scenario.planning);
    row.correctness = match row.mode {
        CorrectnessMode::Match => u8::from(row.iou >= 1.0 && row.tc == 1),
        CorrectnessMode::Executed => {
            let (ok, reason) = execute_plan(plan, prompt, scenario, &case.goals, case.tick_budget);
            if !ok {
                row.reason = Some(reason);
            }
            u8::from(ok)
        }
    };
}

fn score_case(
    factory: &PlannerFactory<'_>,
    case: &BenchmarkCase,
    scenario: &Scenario,
    prompt: &str,
    variant: Option<usize>,
    iteration: u32,
) -> ScoreRow {
    let mut planner = match factory(scenario) {
        Ok(p) => p,
        Err(e) => {
            let mut row = ScoreRow::empty(case, prompt, variant, iteration, "unavailable");
            row.status = RowStatus::Skipped;
            row.reason = Some(e.to_string());
            return row;
        }
    };
    let mut row = ScoreRow::empty(case, prompt, variant, iteration, &planner.id());
    match plan_prompt(planner.as_mut(), scenario, prompt) {
        Ok(plan) => score_plan(&mut row, &plan, case, scenario, prompt),
        Err(PlannerError::Backend(e @ BackendError::Unavailable(_))) => {
            row.status = RowStatus::Skipped;
            row.reason = Some(e.to_string());
        }
        Err(e) => row.reason = Some(e.to_string()),
    }
    row
}

/// One row per (case, prompt variant, iteration).
pub fn run_benchmark(dataset: &Dataset, factory: &PlannerFactory<'_>, opts: BenchOptions) -> Report {
    let mut rows = Vec::new();
    let mut backend = String::from("unavailable");
    for iteration in 0..opts.iterations {
        for case in &dataset.cases {
            let scenario = &dataset.scenarios[&case.scenario];
            let mut prompts = vec![(None, case.prompt.as_str())];
            if opts.paraphrases {
                prompts.extend(case.paraphrases.iter().enumerate().map(|(i, p)| (Some(i), p.as_str())));
            }
            for (variant, prompt) in prompts {
                let row = score_case(factory, case, scenario, prompt, variant, iteration);
                if row.status == RowStatus::Scored {
                    backend = row.backend.clone();
                }
                rows.push(row);
            }
        }
    }
    Report::from_rows(&backend, opts.iterations, rows)
}

/// Two-phase replanning protocol: the post-event plan is scored only when
/// the initial plan is correct and the event reached the manager.
pub fn run_replan_benchmark(dataset: &Dataset, factory: &PlannerFactory<'_>, iterations: u32) -> Report {
    let mut rows = Vec::new();
    let mut backend = String::from("unavailable");
    for iteration in 0..iterations {
        for case in dataset.cases.iter() {
            let Some(ext) = &case.replan else { continue };
            let scenario = &dataset.scenarios[&case.scenario];
            let initial = score_case(factory, case, scenario, &case.prompt, None, iteration);
            let mut row = ScoreRow::empty(case, &case.prompt, None, iteration, &initial.backend);
            row.mode = CorrectnessMode::Executed;
            if initial.status == RowStatus::Skipped {
                row.status = RowStatus::Skipped;
                row.reason = initial.reason;
                rows.push(row);
                continue;
            }
            if initial.correctness != 1 {
                row.status = RowStatus::Gated;
                row.reason = Some(format!("initial plan incorrect: {}", initial.reason.unwrap_or_default()));
                tracing::info!(case = %case.id, "replan row gated on initial plan");
                rows.push(row);
                continue;
            }
            let mut s = scenario.clone();
            if let Some(script) = &ext.script {
                s.script = script.clone();
            }
            s.goals = ext.goals.clone();
            let planner = match factory(&s) {
                Ok(p) => p,
                Err(e) => {
                    row.status = RowStatus::Skipped;
                    row.reason = Some(e.to_string());
                    rows.push(row);
                    continue;
                }
            };
            let mut rt = match Runtime::new(s.clone(), planner, StaticRules::default()) {
                Ok(rt) => rt,
                Err(e) => {
                    row.reason = Some(e.to_string());
                    rows.push(row);
                    continue;
                }
            };
            let report = rt.run();
            backend = report.backend.clone();
            let relevant = rt.bus().log().iter().any(|e| matches!(e.payload, Payload::EventReport { .. }))
                || rt.manager().decisions().iter().any(|d| {
                    matches!(d, crate::manager::Decision::Route { route: HumanRoute::IntentChange, .. })
                });
            if !relevant {
                row.status = RowStatus::Gated;
                row.reason = Some("event not classified relevant".into());
                tracing::info!(case = %case.id, "replan row gated on relevance");
                rows.push(row);
                continue;
            }
            let Some(replan) = replan_of(&rt) else {
                row.reason = Some("no post-event plan".into());
                rows.push(row);
                continue;
            };
            row.ta = score_ta(&replan, &ext.accepted, &s.config, &s.planning);
            row.tc = score_tc(&replan, &ext.accepted_classes);
            row.iou = score_iou(&replan, &ext.accepted);
            row.exec = score_exec(&replan, &s.config, &s.planning);
            row.correctness = u8::from(report.goals_met() && report.outcome != RunOutcome::BudgetExceeded);
            if row.correctness == 0 {
                row.reason = Some(format!("replay ended {:?} with goals unmet", report.outcome));
            }
            rows.push(row);
        }
    }
    Report::from_rows(&backend, iterations, rows)
}

/// First plan produced without a new command.
fn replan_of(rt: &Runtime) -> Option<Plan> {
    rt.manager().decisions().iter().find_map(|d| match d {
        crate::manager::Decision::Plan { command: None, plan, .. } => Some(plan.clone()),
        _ => None,
    })
}
