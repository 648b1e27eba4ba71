//! Planner backends behind one interface, plus plan parsing and validation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::domain::{canonical_posture_verb, Plan, RobotId, ScenarioConfig};
use crate::language::{canonical_step, parse_intent, Referent, Resolver};
use crate::manager::DynamicContext;
use crate::rules::{route_human_input, CapabilityTable, HumanRoute, RulePlanner, ScenarioTable};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("backend_unavailable: {0}")]
    Unavailable(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlannerError {
    #[error("planner_failure: {0}")]
    PlannerFailure(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// A text-in, text-out completion endpoint.
pub trait ChatModel: Send {
    fn complete(&mut self, prompt: &str) -> Result<String, BackendError>;

    fn id(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackendKind {
    Rule,
    Remote,
}

fn default_temperature() -> f64 {
    0.5
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    250
}
fn default_key_env() -> String {
    "COMUROS_API_KEY".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Transport retries per request, and re-prompts per plan.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Rule,
            endpoint: None,
            model: None,
            temperature: default_temperature(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            api_key_env: default_key_env(),
        }
    }
}

impl BackendConfig {
    pub fn remote(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self { kind: BackendKind::Remote, endpoint: Some(endpoint.into()), model: Some(model.into()), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::Config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.kind == BackendKind::Remote && (self.endpoint.is_none() || self.model.is_none()) {
            return Err(BackendError::Config("REMOTE requires endpoint and model".into()));
        }
        Ok(())
    }

    /// Load from `.toml` or `.json`.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| BackendError::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| BackendError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the request log. Credentials never appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub attempt: u32,
    pub url: String,
    pub model: String,
    pub authorization: Option<String>,
    pub prompt_chars: usize,
    pub status: Option<u16>,
    pub error: Option<String>,
    pub reply_chars: Option<usize>,
}

pub type RequestLog = Arc<Mutex<Vec<RequestLogEntry>>>;

fn record(log: &RequestLog, entry: RequestLogEntry) {
    tracing::info!(target: "comuros::requests", "{}", serde_json::to_string(&entry).unwrap_or_default());
    log.lock().expect("request log").push(entry);
}

/// Chat-completion client over blocking HTTP.
pub struct RemoteModel {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    log: RequestLog,
    system: Option<String>,
}

impl RemoteModel {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { config, client, api_key, log: Arc::default(), system: None })
    }

    /// Fixed system message, e.g. the static rules.
    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }

    pub fn log(&self) -> RequestLog {
        self.log.clone()
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, (bool, Option<u16>, String)> {
        let url = self.config.endpoint.as_deref().unwrap_or_default();
        let mut req = self.client.post(url).json(body);
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| (true, None, e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err((true, Some(status.as_u16()), format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err((false, Some(status.as_u16()), format!("HTTP {status}")));
        }
        let v: serde_json::Value = resp.json().map_err(|e| (false, Some(status.as_u16()), e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| (false, Some(status.as_u16()), "reply lacks choices[0].message.content".into()))
    }
}

impl ChatModel for RemoteModel {
    fn complete(&mut self, prompt: &str) -> Result<String, BackendError> {
        let model = self.config.model.clone().unwrap_or_default();
        let mut messages = Vec::new();
        if let Some(s) = &self.system {
            messages.push(json!({"role": "system", "content": s}));
        }
        messages.push(json!({"role": "user", "content": prompt}));
        let body = json!({"model": model, "temperature": self.config.temperature, "messages": messages});
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(10))));
            }
            let result = self.attempt(&body);
            let mut entry = RequestLogEntry {
                attempt: attempt + 1,
                url: self.config.endpoint.clone().unwrap_or_default(),
                model: model.clone(),
                authorization: self.api_key.as_ref().map(|_| "Bearer [REDACTED]".into()),
                prompt_chars: prompt.chars().count(),
                status: None,
                error: None,
                reply_chars: None,
            };
            match result {
                Ok(text) => {
                    entry.status = Some(200);
                    entry.reply_chars = Some(text.chars().count());
                    record(&self.log, entry);
                    return Ok(text);
                }
                Err((retryable, status, err)) => {
                    entry.status = status;
                    entry.error = Some(err.clone());
                    record(&self.log, entry);
                    last = err;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(BackendError::Unavailable(last))
    }

    fn id(&self) -> String {
        format!("remote:{}", self.config.model.as_deref().unwrap_or("?"))
    }
}

/// Replays canned replies in order; the last reply repeats once exhausted.
#[derive(Debug, Clone)]
pub struct FixtureModel {
    name: String,
    replies: VecDeque<String>,
    last: Option<String>,
    prompts: Arc<Mutex<Vec<String>>>,
}

impl FixtureModel {
    pub fn new(name: impl Into<String>, replies: impl IntoIterator<Item = String>) -> Self {
        Self { name: name.into(), replies: replies.into_iter().collect(), last: None, prompts: Arc::default() }
    }

    /// Prompts received so far (shared with clones).
    pub fn prompts(&self) -> Arc<Mutex<Vec<String>>> {
        self.prompts.clone()
    }
}

impl ChatModel for FixtureModel {
    fn complete(&mut self, prompt: &str) -> Result<String, BackendError> {
        self.prompts.lock().expect("prompts").push(prompt.to_string());
        match self.replies.pop_front() {
            Some(r) => {
                self.last = Some(r.clone());
                Ok(r)
            }
            None => self.last.clone().ok_or_else(|| BackendError::Unavailable("fixture has no replies".into())),
        }
    }

    fn id(&self) -> String {
        format!("fixture:{}", self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse_error: {0}")]
pub struct ParseError(pub String);

/// Candidate JSON object spans: fenced blocks first, then balanced braces.
fn json_candidates(raw: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let Some(end) = after[body_start..].find("```") else { break };
        let body = after[body_start..body_start + end].trim();
        if body.starts_with('{') {
            out.push(body);
        }
        rest = &after[body_start + end + 3..];
    }
    let bytes = raw.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut depth = 0i32;
            let mut in_str = false;
            let mut esc = false;
            let mut j = i;
            while j < bytes.len() {
                let c = bytes[j];
                if in_str {
                    if esc {
                        esc = false;
                    } else if c == b'\\' {
                        esc = true;
                    } else if c == b'"' {
                        in_str = false;
                    }
                } else if c == b'"' {
                    in_str = true;
                } else if c == b'{' {
                    depth += 1;
                } else if c == b'}' {
                    depth -= 1;
                    if depth == 0 {
                        break;
                    }
                }
                j += 1;
            }
            if depth == 0 && j < bytes.len() {
                out.push(&raw[i..=j]);
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Extract the first JSON object in `raw` that deserializes as a [`Plan`].
pub fn parse_plan(raw: &str) -> Result<Plan, ParseError> {
    let mut first_err: Option<String> = None;
    for cand in json_candidates(raw) {
        let value: serde_json::Value = match serde_json::from_str(cand) {
            Ok(v) => v,
            Err(e) => {
                first_err.get_or_insert(format!("invalid JSON: {e}"));
                continue;
            }
        };
        match serde_json::from_value::<Plan>(value) {
            Ok(plan) => {
                plan.check_structure(|_| true).map_err(|e| ParseError(strip_prefix(&e.to_string())))?;
                return Ok(plan);
            }
            Err(e) => {
                first_err.get_or_insert(e.to_string());
            }
        }
    }
    Err(ParseError(first_err.unwrap_or_else(|| "no JSON object".into())))
}

fn strip_prefix(s: &str) -> String {
    s.strip_prefix("invalid plan: ").unwrap_or(s).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanViolation {
    pub step_id: String,
    pub message: String,
}

impl std::fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {}: {}", self.step_id, self.message)
    }
}

/// Per-step executability checks.
pub fn validate_plan(plan: &Plan, config: &ScenarioConfig, table: &CapabilityTable) -> Vec<PlanViolation> {
    let resolver = Resolver::new(config);
    let mut out = Vec::new();
    if plan.is_infeasible() {
        for s in plan.steps.iter().filter(|s| !config.is_human(&s.assignee)) {
            out.push(PlanViolation { step_id: s.step_id.clone(), message: "robot step in INFEASIBLE plan".into() });
        }
    }
    for s in &plan.steps {
        let v = |m: String| PlanViolation { step_id: s.step_id.clone(), message: m };
        if config.is_human(&s.assignee) {
            continue;
        }
        let Some(robot) = config.robot(&s.assignee) else {
            out.push(v(format!("unknown assignee {}", s.assignee)));
            continue;
        };
        let mut needed: BTreeSet<String> = s.required_capabilities.clone();
        needed.extend(table.required(&s.instruction).unwrap_or_default());
        for cap in needed.iter().filter(|c| !robot.has(c)) {
            out.push(v(format!("missing capability {cap}")));
        }
        let Some(intent) = parse_intent(&s.instruction) else { continue };
        let Some(target) = intent.placement_target() else { continue };
        let Some(Referent::Robot(carrier)) = resolver.resolve(target) else { continue };
        let Some(posture) = config.robot(&carrier).and_then(|r| r.required_posture_for_loading()) else { continue };
        let verb = canonical_posture_verb(&posture);
        let ancestors = plan.ancestors(&s.step_id);
        let prepared = ancestors
            .iter()
            .filter_map(|a| plan.step(a))
            .any(|a| a.assignee == carrier && canonical_step(&a.instruction) == verb);
        if !prepared {
            out.push(v("constraint unsatisfiable".into()));
        }
    }
    out
}

/// Everything a backend sees when asked for a plan.
#[derive(Debug, Clone)]
pub struct PlanRequest<'a> {
    pub plan_id: String,
    /// Fully assembled context text (used by language-model backends).
    pub prompt: String,
    pub context: &'a DynamicContext,
    /// New command; `None` means replan the open steps.
    pub command: Option<String>,
    pub busy: BTreeSet<RobotId>,
}

pub trait Planner: Send {
    fn id(&self) -> String;

    fn plan(&mut self, req: &PlanRequest<'_>) -> Result<Plan, PlannerError>;

    fn route_input(&mut self, text: &str, help_pending: bool, commands: &[String]) -> HumanRoute;

    /// Raw exchanges since the last call, for the decision log.
    fn take_transcript(&mut self) -> Vec<(String, String)> {
        Vec::new()
    }
}

pub struct RuleBackend {
    planner: RulePlanner,
}

impl RuleBackend {
    pub fn new(config: &ScenarioConfig, table: &ScenarioTable) -> Self {
        Self { planner: RulePlanner::new(config, table) }
    }

    pub fn planner(&self) -> &RulePlanner {
        &self.planner
    }
}

impl Planner for RuleBackend {
    fn id(&self) -> String {
        "rule".into()
    }

    fn plan(&mut self, req: &PlanRequest<'_>) -> Result<Plan, PlannerError> {
        Ok(match &req.command {
            Some(c) => self.planner.plan_command(&req.plan_id, c, &req.busy),
            None => self.planner.replan(&req.plan_id, req.context),
        })
    }

    fn route_input(&mut self, text: &str, help_pending: bool, commands: &[String]) -> HumanRoute {
        route_human_input(text, help_pending, commands, &self.planner)
    }
}

/// Language-model planner with the re-prompt-on-validation-error loop.
pub struct LlmPlanner {
    model: Box<dyn ChatModel>,
    config: ScenarioConfig,
    fallback: RulePlanner,
    max_reprompts: u32,
    transcript: Vec<(String, String)>,
}

impl LlmPlanner {
    pub fn new(model: Box<dyn ChatModel>, config: &ScenarioConfig, table: &ScenarioTable, max_reprompts: u32) -> Self {
        Self {
            model,
            config: config.clone(),
            fallback: RulePlanner::new(config, table),
            max_reprompts,
            transcript: Vec::new(),
        }
    }

    fn check(&self, plan: &Plan) -> Result<(), String> {
        plan.check_structure(|a| self.config.is_human(a)).map_err(|e| strip_prefix(&e.to_string()))?;
        let unknown: Vec<&str> = plan
            .steps
            .iter()
            .filter(|s| self.config.robot(&s.assignee).is_none() && !self.config.is_human(&s.assignee))
            .map(|s| s.assignee.as_str())
            .collect();
        if !unknown.is_empty() {
            return Err(format!("unknown assignee(s): {}", unknown.join(", ")));
        }
        Ok(())
    }
}

impl Planner for LlmPlanner {
    fn id(&self) -> String {
        self.model.id()
    }

    fn plan(&mut self, req: &PlanRequest<'_>) -> Result<Plan, PlannerError> {
        let mut prompt = req.prompt.clone();
        let mut last = String::new();
        for _ in 0..=self.max_reprompts {
            let reply = self.model.complete(&prompt)?;
            self.transcript.push((prompt.clone(), reply.clone()));
            let outcome = parse_plan(&reply).map_err(|e| e.0).and_then(|p| self.check(&p).map(|_| p));
            match outcome {
                Ok(mut plan) => {
                    plan.plan_id = req.plan_id.clone();
                    if plan.source_command_id.is_empty() {
                        plan.source_command_id = req.command.clone().unwrap_or_else(|| "replan".into());
                    }
                    return Ok(plan);
                }
                Err(e) => {
                    last = e.clone();
                    prompt = format!("{}\n\nYour previous reply was rejected: {e}\nReply again with a corrected plan JSON.", req.prompt);
                }
            }
        }
        Err(PlannerError::PlannerFailure(last))
    }

    fn route_input(&mut self, text: &str, help_pending: bool, commands: &[String]) -> HumanRoute {
        let prompt = format!(
            "Classify the operator message as one of NEW_COMMAND, INTENT_CHANGE, HELP_DONE, INFORMATION.\n\
             A help request is {}pending.\nMessage: {text}\nAnswer with the label only.",
            if help_pending { "" } else { "not " }
        );
        let fallback = || route_human_input(text, help_pending, commands, &self.fallback);
        match self.model.complete(&prompt) {
            Ok(reply) => {
                self.transcript.push((prompt, reply.clone()));
                let up = reply.to_ascii_uppercase();
                if up.contains("INTENT_CHANGE") {
                    HumanRoute::IntentChange
                } else if up.contains("HELP_DONE") && help_pending {
                    HumanRoute::HelpDone
                } else if up.contains("NEW_COMMAND") {
                    match fallback() {
                        HumanRoute::NewCommand(c) => HumanRoute::NewCommand(c),
                        _ => HumanRoute::NewCommand(text.trim().to_string()),
                    }
                } else if up.contains("INFORMATION") {
                    HumanRoute::Information
                } else {
                    fallback()
                }
            }
            Err(_) => fallback(),
        }
    }

    fn take_transcript(&mut self) -> Vec<(String, String)> {
        std::mem::take(&mut self.transcript)
    }
}

/// Build a planner from config. REMOTE planners get the static rules as
/// their system message.
pub fn make_planner(
    backend: &BackendConfig,
    config: &ScenarioConfig,
    table: &ScenarioTable,
    static_rules: &str,
) -> Result<Box<dyn Planner>, BackendError> {
    match backend.kind {
        BackendKind::Rule => Ok(Box::new(RuleBackend::new(config, table))),
        BackendKind::Remote => {
            let model = RemoteModel::new(backend.clone())?.with_system(static_rules);
            Ok(Box::new(LlmPlanner::new(Box::new(model), config, table, backend.max_retries)))
        }
    }
}

/// Per-robot map of instructions, for summaries.
pub fn steps_by_assignee(plan: &Plan) -> BTreeMap<String, Vec<String>> {
    let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for s in &plan.steps {
        m.entry(s.assignee.clone()).or_default().push(s.instruction.clone());
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Assignment, TaskClass};

    fn plan() -> Plan {
        Plan {
            plan_id: "p1".into(),
            classes: BTreeSet::from([TaskClass::Sequential]),
            steps: vec![
                Assignment {
                    step_id: "s1".into(),
                    assignee: "waffle".into(),
                    instruction: "pick up the green object".into(),
                    required_capabilities: BTreeSet::from(["pick".into()]),
                    depends_on: BTreeSet::new(),
                    sync_group: None,
                },
                Assignment {
                    step_id: "s2".into(),
                    assignee: "go2".into(),
                    instruction: "sit".into(),
                    required_capabilities: BTreeSet::new(),
                    depends_on: BTreeSet::from(["s1".into()]),
                    sync_group: None,
                },
            ],
            source_command_id: "c1".into(),
        }
    }

    #[test]
    fn fenced_and_bare_json_parse() {
        let p = plan();
        let text = serde_json::to_string_pretty(&p).unwrap();
        assert_eq!(parse_plan(&format!("Here you go:\n```json\n{text}\n```\nthanks")).unwrap(), p);
        assert_eq!(parse_plan(&format!("plan: {text} end")).unwrap(), p);
    }

    #[test]
    fn prose_reply_is_parse_error() {
        assert_eq!(parse_plan("I cannot help").unwrap_err().0, "no JSON object");
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_plan(r#"{"plan_id":"p","classes":["INDEPENDENT"]}"#).unwrap_err();
        assert!(err.0.contains("steps"), "{err}");
    }

    #[test]
    fn cycle_reported_as_walk() {
        let mut p = plan();
        p.steps[0].depends_on.insert("s2".into());
        let err = parse_plan(&serde_json::to_string(&p).unwrap()).unwrap_err();
        assert_eq!(err.0, "cycle: s1→s2→s1");
    }

    #[test]
    fn backend_config_rules() {
        assert!(BackendConfig::default().validate().is_ok());
        let mut c = BackendConfig { kind: BackendKind::Remote, ..BackendConfig::default() };
        assert!(c.validate().is_err());
        c = BackendConfig::remote("http://x", "m");
        c.temperature = 2.5;
        assert!(c.validate().is_err());
        assert_eq!(BackendConfig::default().temperature, 0.5);
    }

    #[test]
    fn fixture_repeats_last_reply() {
        let mut m = FixtureModel::new("t", ["a".to_string(), "b".to_string()]);
        assert_eq!(m.complete("1").unwrap(), "a");
        assert_eq!(m.complete("2").unwrap(), "b");
        assert_eq!(m.complete("3").unwrap(), "b");
        assert_eq!(m.prompts().lock().unwrap().len(), 3);
    }
}
