//! Instruction normalization and the small imperative grammar shared by the
//! rule planner, the skill composer, the plan validator and the metrics.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::{fmt_num, ScenarioConfig, Vec2};

/// Verb synonyms. No value may appear as a key, which keeps
/// [`canonical_step`] idempotent.
pub const SYNONYMS: &[(&str, &str)] = &[
    ("grab", "pick"),
    ("take", "pick"),
    ("collect", "pick"),
    ("put", "place"),
    ("deposit", "place"),
    ("go", "move"),
    ("drive", "move"),
    ("walk", "move"),
    ("navigate", "move"),
    ("head", "move"),
    ("transport", "carry"),
    ("haul", "carry"),
    ("locate", "find"),
    ("seek", "find"),
    ("scan", "survey"),
    ("search", "survey"),
    ("patrol", "survey"),
    ("bring", "deliver"),
];

static COORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)").expect("regex"));
static DECIMAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+\.\d+").expect("regex"));

fn synonym(word: &str) -> &str {
    SYNONYMS.iter().find(|(k, _)| *k == word).map(|(_, v)| *v).unwrap_or(word)
}

/// Deterministic normal form of a natural-language step: lowercase, ASCII
/// alphanumerics only, collapsed whitespace, coordinates written `(x,y)`,
/// verb synonyms mapped through [`SYNONYMS`].
pub fn canonical_step(instruction: &str) -> String {
    let lower = instruction.to_lowercase().replace('_', " ");
    // protect coordinates and decimals before stripping punctuation
    let mut protected: Vec<String> = Vec::new();
    let with_coords = COORD.replace_all(&lower, |c: &regex::Captures| {
        let x: f64 = c[1].parse().unwrap_or(0.0);
        let y: f64 = c[2].parse().unwrap_or(0.0);
        protected.push(format!("({},{})", fmt_num(x), fmt_num(y)));
        format!(" \u{1}{}\u{1} ", protected.len() - 1)
    });
    let with_decimals = DECIMAL.replace_all(&with_coords, |c: &regex::Captures| {
        protected.push(c[0].to_string());
        format!(" \u{1}{}\u{1} ", protected.len() - 1)
    });
    let mut cleaned = String::with_capacity(with_decimals.len());
    for ch in with_decimals.chars() {
        if ch == '\'' || ch == '\u{2019}' {
            continue;
        }
        if ch.is_ascii_alphanumeric() || ch == '\u{1}' {
            cleaned.push(ch);
        } else {
            cleaned.push(' ');
        }
    }
    cleaned
        .split_whitespace()
        .map(|w| {
            if let Some(idx) = w.strip_prefix('\u{1}').and_then(|r| r.strip_suffix('\u{1}')) {
                idx.parse::<usize>().ok().and_then(|i| protected.get(i).cloned()).unwrap_or_default()
            } else {
                synonym(w).to_string()
            }
        })
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parsed imperative. Object and target phrases are kept as canonical text;
/// resolve them with [`Resolver`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "snake_case")]
pub enum Intent {
    Wait,
    Sit,
    Stand,
    Approach { object: String },
    Find { object: String },
    MoveTo { target: String },
    Fly { target: String },
    FormationCarry { object: String, target: String },
    Carry { object: String, target: String },
    PickPlace { object: String, target: String },
    Pick { object: String },
    Place { object: String, target: String },
    Push { object: String, target: String },
    Survey { region: String },
    Deliver { object: String, target: String },
}

impl Intent {
    /// Key into the capability table.
    pub fn verb(&self) -> &'static str {
        match self {
            Intent::Wait => "wait",
            Intent::Sit => "sit",
            Intent::Stand => "stand",
            Intent::Approach { .. } => "approach",
            Intent::Find { .. } => "find",
            Intent::MoveTo { .. } => "move",
            Intent::Fly { .. } => "fly",
            Intent::FormationCarry { .. } => "formation_carry",
            Intent::Carry { .. } => "carry",
            Intent::PickPlace { .. } => "pick_place",
            Intent::Pick { .. } => "pick",
            Intent::Place { .. } => "place",
            Intent::Push { .. } => "push",
            Intent::Survey { .. } => "survey",
            Intent::Deliver { .. } => "deliver",
        }
    }

    /// Phrases naming things the instruction touches.
    pub fn mentions(&self) -> Vec<&str> {
        match self {
            Intent::Wait | Intent::Sit | Intent::Stand => vec![],
            Intent::Approach { object } | Intent::Find { object } | Intent::Pick { object } => vec![object],
            Intent::MoveTo { target } | Intent::Fly { target } => vec![target],
            Intent::Survey { region } => vec![region],
            Intent::FormationCarry { object, target }
            | Intent::Carry { object, target }
            | Intent::PickPlace { object, target }
            | Intent::Place { object, target }
            | Intent::Push { object, target }
            | Intent::Deliver { object, target } => vec![object, target],
        }
    }

    /// The object phrase, when the instruction manipulates one.
    pub fn object(&self) -> Option<&str> {
        match self {
            Intent::Approach { object }
            | Intent::Find { object }
            | Intent::Pick { object }
            | Intent::FormationCarry { object, .. }
            | Intent::Carry { object, .. }
            | Intent::PickPlace { object, .. }
            | Intent::Place { object, .. }
            | Intent::Push { object, .. }
            | Intent::Deliver { object, .. } => Some(object),
            _ => None,
        }
    }

    /// Where something gets placed, for `place`-like instructions.
    pub fn placement_target(&self) -> Option<&str> {
        match self {
            Intent::PickPlace { target, .. } | Intent::Place { target, .. } => Some(target),
            _ => None,
        }
    }
}

static PATTERNS: LazyLock<Vec<(Regex, fn(&regex::Captures) -> Intent)>> = LazyLock::new(|| {
    let r = |s: &str| Regex::new(s).expect("intent regex");
    vec![
        (r(r"^wait\b"), |_| Intent::Wait),
        (r(r"^sit(?: down)?$"), |_| Intent::Sit),
        (r(r"^stand(?: up)?$"), |_| Intent::Stand),
        (r(r"^approach (.+)$"), |c| Intent::Approach { object: strip_article(&c[1]).into() }),
        (r(r"^find (.+)$"), |c| Intent::Find { object: strip_article(&c[1]).into() }),
        (r(r"^(?:move|return)(?: back)? to (.+)$"), |c| Intent::MoveTo { target: strip_article(&c[1]).into() }),
        (r(r"^fly to (.+)$"), |c| Intent::Fly { target: strip_article(&c[1]).into() }),
        (r(r"^carry (.+?) in formation to (.+)$"), |c| Intent::FormationCarry {
            object: strip_article(&c[1]).into(),
            target: strip_article(&c[2]).into(),
        }),
        (r(r"^carry (.+?) to (.+)$"), |c| Intent::Carry {
            object: strip_article(&c[1]).into(),
            target: strip_article(&c[2]).into(),
        }),
        (r(r"^pick (?:up )?(.+?) and place it (?:back )?(?:on|onto|into|in) (.+)$"), |c| Intent::PickPlace {
            object: strip_article(&c[1]).into(),
            target: strip_article(&c[2]).into(),
        }),
        (r(r"^pick (?:up )?(.+)$"), |c| Intent::Pick { object: strip_article(&c[1]).into() }),
        (r(r"^place (.+?) (?:back )?(?:on|onto|into|in) (.+)$"), |c| Intent::Place {
            object: strip_article(&c[1]).into(),
            target: strip_article(&c[2]).into(),
        }),
        (r(r"^push (.+?) (?:into|to|toward|towards|off) (.+)$"), |c| Intent::Push {
            object: strip_article(&c[1]).into(),
            target: strip_article(&c[2]).into(),
        }),
        (r(r"^survey (.+?)(?: for .+)?$"), |c| Intent::Survey { region: strip_article(&c[1]).into() }),
        (r(r"^deliver (.+?) to (.+)$"), |c| Intent::Deliver {
            object: strip_article(&c[1]).into(),
            target: strip_article(&c[2]).into(),
        }),
    ]
});

fn strip_article(s: &str) -> &str {
    let s = s.trim();
    for a in ["the ", "a ", "an ", "its ", "their "] {
        if let Some(rest) = s.strip_prefix(a) {
            return rest.trim();
        }
    }
    s
}

/// Parse one instruction (any casing/punctuation) into an [`Intent`].
pub fn parse_intent(instruction: &str) -> Option<Intent> {
    let canon = canonical_step(instruction);
    let canon = canon.strip_prefix("please ").unwrap_or(&canon);
    PATTERNS.iter().find_map(|(re, build)| re.captures(canon).map(|c| build(&c)))
}

/// What a phrase names inside a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Referent {
    Robot(String),
    Human(String),
    Object(String),
    Location(String),
    Region(String),
    Coord(Vec2),
}

impl Referent {
    pub fn id(&self) -> Option<&str> {
        match self {
            Referent::Robot(s)
            | Referent::Human(s)
            | Referent::Object(s)
            | Referent::Location(s)
            | Referent::Region(s) => Some(s),
            Referent::Coord(_) => None,
        }
    }
}

/// Maps noun phrases onto scenario entities.
#[derive(Debug, Clone)]
pub struct Resolver {
    names: BTreeMap<String, Referent>,
}

fn spaced(id: &str) -> String {
    canonical_step(id)
}

impl Resolver {
    pub fn new(config: &ScenarioConfig) -> Self {
        let mut names = BTreeMap::new();
        // later inserts win, so insert weakest names first
        for r in &config.robots {
            if !r.kind.is_empty() {
                names.entry(spaced(&r.kind)).or_insert_with(|| Referent::Robot(r.id.clone()));
            }
        }
        for o in &config.objects {
            for a in o.aliases.iter().chain(std::iter::once(&o.kind).filter(|k| !k.is_empty())) {
                let a = spaced(a);
                names.entry(format!("{a}s")).or_insert_with(|| Referent::Object(o.id.clone()));
                names.entry(a).or_insert_with(|| Referent::Object(o.id.clone()));
            }
        }
        for r in &config.robots {
            for a in &r.aliases {
                names.insert(spaced(a), Referent::Robot(r.id.clone()));
            }
        }
        for (n, _) in &config.regions {
            names.insert(spaced(n), Referent::Region(n.clone()));
        }
        for (n, _) in &config.locations {
            names.insert(spaced(n), Referent::Location(n.clone()));
        }
        for o in &config.objects {
            names.insert(spaced(&o.id), Referent::Object(o.id.clone()));
        }
        for h in &config.humans {
            names.insert(spaced(h), Referent::Human(h.clone()));
        }
        for r in &config.robots {
            names.insert(spaced(&r.id), Referent::Robot(r.id.clone()));
        }
        Self { names }
    }

    pub fn resolve(&self, phrase: &str) -> Option<Referent> {
        let canon = canonical_step(phrase);
        let canon = strip_article(&canon);
        if let Some(c) = COORD.captures(canon) {
            if c.get(0).map(|m| m.as_str().len()) == Some(canon.len()) {
                let x = c[1].parse().ok()?;
                let y = c[2].parse().ok()?;
                return Some(Referent::Coord(Vec2::new(x, y)));
            }
        }
        self.names.get(canon).cloned()
    }

    /// All entity ids whose names appear as whole words in `text`.
    pub fn mentioned_ids(&self, text: &str) -> Vec<String> {
        let canon = format!(" {} ", canonical_step(text));
        let mut out: Vec<String> = self
            .names
            .iter()
            .filter(|(name, _)| canon.contains(&format!(" {name} ")))
            .filter_map(|(_, r)| r.id().map(str::to_string))
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Whole-word test: does `instruction` name entity `id` (or an alias)?
pub fn mentions_entity(instruction: &str, id: &str, aliases: &[String]) -> bool {
    let text = format!(" {} ", canonical_step(instruction));
    std::iter::once(id.to_string()).chain(aliases.iter().cloned()).any(|name| {
        let n = canonical_step(&name);
        !n.is_empty() && (text.contains(&format!(" {n} ")) || text.contains(&format!(" {n}s ")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lowercases_and_strips_punctuation() {
        assert_eq!(canonical_step("Pick up the green object."), "pick up the green object");
    }

    #[test]
    fn maps_synonyms() {
        assert_eq!(canonical_step("Grab the green object"), "pick the green object");
        assert_eq!(canonical_step("Go to the catch point"), "move to the catch point");
    }

    #[test]
    fn normalizes_coordinates() {
        assert_eq!(canonical_step("Carry the green object to ( 3.0 , 0 )!"), "carry the green object to (3,0)");
        assert_eq!(canonical_step("move to (-1.5,2)"), "move to (-1.5,2)");
    }

    #[test]
    fn underscores_become_spaces() {
        assert_eq!(canonical_step("approach green_object"), "approach green object");
    }

    #[test]
    fn parses_core_intents() {
        assert_eq!(parse_intent("Approach the bottle"), Some(Intent::Approach { object: "bottle".into() }));
        assert_eq!(parse_intent("sit"), Some(Intent::Sit));
        assert_eq!(
            parse_intent("Pick up the green object and place it on the quadruped"),
            Some(Intent::PickPlace { object: "green object".into(), target: "quadruped".into() })
        );
        assert_eq!(
            parse_intent("carry the box in formation to the catch point"),
            Some(Intent::FormationCarry { object: "box".into(), target: "catch point".into() })
        );
        assert_eq!(
            parse_intent("carry the green object to (3,0)"),
            Some(Intent::Carry { object: "green object".into(), target: "(3,0)".into() })
        );
        assert_eq!(
            parse_intent("Survey the disaster zone for survivors"),
            Some(Intent::Survey { region: "disaster zone".into() })
        );
        assert_eq!(parse_intent("dance wildly"), None);
    }

    #[test]
    fn mentions_use_whole_words() {
        assert!(mentions_entity("carry the green object to (3,0)", "green_object", &[]));
        assert!(!mentions_entity("carry the green object to (3,0)", "red_object", &[]));
        assert!(mentions_entity("survey the zone for survivors", "survivor_1", &["survivor".into()]));
    }

    proptest! {
        #[test]
        fn canonical_step_is_idempotent(s in "\\PC{0,60}") {
            let once = canonical_step(&s);
            prop_assert_eq!(canonical_step(&once), once);
        }

        #[test]
        fn canonical_step_is_idempotent_on_instruction_like_text(
            verb in prop::sample::select(vec!["Grab", "put", "Go", "carry", "push", "Pick up"]),
            obj in "[A-Za-z_ ]{1,12}",
            x in -20.0f64..20.0, y in -20.0f64..20.0,
        ) {
            let s = format!("{verb} the {obj} to ({x:.3}, {y:.1}).");
            let once = canonical_step(&s);
            prop_assert_eq!(canonical_step(&once), once);
        }
    }
}
