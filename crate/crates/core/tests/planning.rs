use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use comuros_core::manager::{assemble_context, DynamicContext, StaticRules, SECTION_ORDER};
use comuros_core::planner::validate_plan;
use comuros_core::rules::RulePlanner;
use comuros_core::runtime::Scenario;
use comuros_core::{ChatEntry, ChatRole, Event, Plan, Relevance, RobotStatus, TaskClass};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(&root().join(format!("../../data/scenarios/{name}.json"))).unwrap()
}

fn plan(name: &str, command: &str) -> (Scenario, Plan) {
    let s = scenario(name);
    let p = RulePlanner::new(&s.config, &s.planning).plan_command("p1", command, &BTreeSet::new());
    (s, p)
}

fn classes(cs: &[TaskClass]) -> BTreeSet<TaskClass> {
    cs.iter().copied().collect()
}

fn by_id<'a>(p: &'a Plan, id: &str) -> &'a comuros_core::Assignment {
    p.steps.iter().find(|s| s.step_id == id).unwrap()
}

#[test]
fn transport_delivery_is_sequential_and_coordinated() {
    let (s, p) = plan("transport", "Deliver the blue ball to (4,0)");
    assert_eq!(p.classes, classes(&[TaskClass::Sequential, TaskClass::Coordinated]));
    let formation = ["f1", "f2", "f3"];
    for f in formation {
        assert_eq!(by_id(&p, f).sync_group.as_deref(), Some("g1"));
        assert!(by_id(&p, f).depends_on.is_empty());
    }
    let push = by_id(&p, "p1");
    assert_eq!(push.assignee, "xarm");
    assert_eq!(push.depends_on.iter().map(String::as_str).collect::<BTreeSet<_>>(), formation.into());
    for m in ["m1", "m2", "m3"] {
        assert_eq!(by_id(&p, m).depends_on, BTreeSet::from(["p1".to_string()]));
        assert_eq!(by_id(&p, m).sync_group.as_deref(), Some("g2"));
    }
    assert!(validate_plan(&p, &s.config, &s.planning.capability_table()).is_empty());
}

#[test]
fn flying_with_ground_robots_and_no_human_is_infeasible() {
    let (s, p) = plan("transport", "Fly to the roof");
    assert!(s.config.humans.is_empty());
    assert_eq!(p.classes, classes(&[TaskClass::Infeasible]));
    assert!(p.steps.is_empty());
}

#[test]
fn unrelated_commands_are_independent_without_edges() {
    let (_, p) = plan("transport", "Burger_1, move to (1,3) and burger_2, move to (1,-3)");
    assert_eq!(p.classes, classes(&[TaskClass::Independent]));
    assert_eq!(p.steps.len(), 2);
    assert!(p.steps.iter().all(|s| s.depends_on.is_empty()));
}

#[test]
fn survey_and_kit_delivery_split_between_drone_and_quadruped() {
    let (_, p) = plan("disaster", "Survey the disaster area and deliver first aid kits to the survivors");
    assert_eq!(p.classes, classes(&[TaskClass::Independent]));
    let who: BTreeMap<&str, &str> = p.steps.iter().map(|s| (s.assignee.as_str(), s.instruction.as_str())).collect();
    assert!(who["drone"].starts_with("survey"));
    assert!(who["go2"].starts_with("deliver"));
}

#[test]
fn ties_go_to_the_lexicographically_first_robot() {
    // burger_1, burger_2 and waffle all navigate and are idle
    let (_, p) = plan("transport", "Move to (1,1)");
    assert_eq!(p.steps.len(), 1);
    assert_eq!(p.steps[0].assignee, "burger_1");
}

#[test]
fn validator_names_missing_capability_and_unsatisfiable_sit() {
    let (s, mut p) = plan("lab_drop", "Waffle, pick up the bottle and place it on the go2");
    let table = s.planning.capability_table();
    assert!(validate_plan(&p, &s.config, &table).is_empty());

    let mut flying = p.clone();
    flying.steps[1].instruction = "fly to (1,1)".into();
    flying.steps[1].assignee = "burger".into();
    flying.steps[1].required_capabilities = ["fly".to_string()].into();
    let v = validate_plan(&flying, &s.config, &table);
    assert!(v.iter().any(|v| v.step_id == "s2" && v.message.contains("fly")), "{v:?}");

    p.steps.retain(|s| s.instruction != "sit" && s.instruction != "stand");
    p.steps[0].depends_on.clear();
    let v = validate_plan(&p, &s.config, &table);
    assert!(v.iter().any(|v| v.message.contains("unsatisfiable")), "{v:?}");
}

fn ctx_for(s: &Scenario, command: &str) -> DynamicContext {
    DynamicContext {
        tick: 1,
        commands: vec![command.into()],
        command: Some(command.into()),
        history: vec![ChatEntry { id: 1, role: ChatRole::User, text: command.into(), timestamp: 100, tick: 1 }],
        robots: s
            .config
            .robots
            .iter()
            .map(|r| (r.id.clone(), RobotStatus { posture: None, position: r.initial_pose.position, busy: false }))
            .collect(),
        humans: s.config.humans.clone(),
        ..DynamicContext::default()
    }
}

fn section<'a>(prompt: &'a str, name: &str) -> &'a str {
    let start = prompt.find(&format!("### {name}")).unwrap();
    let rest = &prompt[start + name.len() + 4..];
    &rest[..rest.find("\n### ").unwrap_or(rest.len())]
}

#[test]
fn prompt_sections_follow_the_fixed_order() {
    let s = scenario("lab_drop");
    let prompt = assemble_context(&StaticRules::default(), &ctx_for(&s, "Burger, move to (2,-2)"), &s.config);
    let at: Vec<usize> = SECTION_ORDER.iter().map(|n| prompt.find(&format!("### {n}")).unwrap()).collect();
    assert!(at.windows(2).all(|w| w[0] < w[1]));
    let history = section(&prompt, "HISTORY");
    assert_eq!(history.lines().filter(|l| !l.trim().is_empty()).count(), 1, "{history}");
}

#[test]
fn human_rule_appears_only_with_humans() {
    let with = scenario("transport_help");
    let without = scenario("transport");
    let cmd = "Deliver the blue ball to (4,0)";
    let a = assemble_context(&StaticRules::default(), &ctx_for(&with, cmd), &with.config);
    let b = assemble_context(&StaticRules::default(), &ctx_for(&without, cmd), &without.config);
    assert!(a.contains("Humans are available"));
    assert!(!b.contains("Humans are available"));
}

#[test]
fn drop_event_prompt_matches_golden() {
    let s = scenario("lab_drop");
    let mut ctx = ctx_for(&s, "Waffle, approach the bottle and go2, carry the green object to (3,0)");
    ctx.tick = 41;
    ctx.command = None;
    let description = "green object fell off the go2 at (1.9,0)";
    ctx.events.push(Event {
        event_id: "burger-1".into(),
        source: "burger".into(),
        description: description.into(),
        tick: 41,
        relevance: Relevance::Relevant,
        observation: None,
    });
    let prompt = assemble_context(&StaticRules::default(), &ctx, &s.config);
    assert!(section(&prompt, "EVENTS").contains(description));

    let golden = root().join("tests/golden/drop_event_prompt.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &prompt).unwrap();
    }
    let want = std::fs::read_to_string(&golden).expect("golden prompt; run with UPDATE_GOLDEN=1 to create");
    assert_eq!(prompt, want);
}
