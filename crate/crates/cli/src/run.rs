use std::path::PathBuf;
use std::process::ExitCode;

use clap::Args;
use comuros_core::benchmark::Dataset;
use comuros_core::manager::{StaticRules, DEFAULT_RULES};
use comuros_core::planner::make_planner;
use comuros_core::runtime::{RunOutcome, Runtime, Scenario};
use comuros_core::world::EventScript;
use comuros_core::CoreError;

use crate::{default_out, invalid, BackendArg, EXIT_SHORT};

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Event script (JSON list) replacing the scenario's own.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArg,
    /// World RNG seed; only matters when pose noise is on.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Tick budget override.
    #[arg(long)]
    pub ticks: Option<u64>,
    /// Log directory; defaults to runs/<scenario>.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    /// Leave help requests unanswered instead of scripting the human.
    #[arg(long)]
    pub no_auto_help: bool,
}

fn print_violations(e: &CoreError) {
    match e {
        CoreError::InvalidScenario(vs) => {
            for v in vs {
                eprintln!("violation: {v}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

pub fn load_scenario(path: &PathBuf) -> Result<Scenario, ExitCode> {
    let s = Scenario::load(path).map_err(|e| {
        print_violations(&e);
        invalid(format!("cannot load scenario {}", path.display()))
    })?;
    let vs = s.validate();
    if !vs.is_empty() {
        print_violations(&CoreError::InvalidScenario(vs));
        return Err(invalid(format!("invalid scenario {}", path.display())));
    }
    Ok(s)
}

pub fn load_script(path: &PathBuf) -> Result<EventScript, ExitCode> {
    std::fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str::<EventScript>(&t).map_err(|e| e.to_string()))
        .map_err(|e| invalid(format!("script {}: {e}", path.display())))
}

pub fn run(args: RunArgs) -> ExitCode {
    let mut scenario = match load_scenario(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if let Some(p) = &args.script {
        match load_script(p) {
            Ok(script) => scenario.script = script,
            Err(code) => return code,
        }
    }
    if let Some(seed) = args.seed {
        scenario.world.rng_seed = seed;
    }
    if let Some(t) = args.ticks {
        scenario.tick_budget = t;
    }
    if args.no_auto_help {
        scenario.human.auto_help = false;
    }
    let backend = match args.backend.load() {
        Ok(b) => b,
        Err(e) => return invalid(e),
    };
    let planner = match make_planner(&backend, &scenario.config, &scenario.planning, DEFAULT_RULES) {
        Ok(p) => p,
        Err(e) => return invalid(e),
    };
    let name = scenario.config.name.clone();
    let mut rt = match Runtime::new(scenario, planner, StaticRules::default()) {
        Ok(rt) => rt,
        Err(e) => {
            print_violations(&e);
            return invalid("scenario rejected");
        }
    };
    let report = rt.run();
    let dir = args.log_dir.unwrap_or_else(|| default_out(&name));
    if let Err(e) = rt.write_logs(&dir) {
        eprintln!("error: writing logs to {}: {e}", dir.display());
    }

    println!("scenario {name}  backend {}  outcome {:?}  ticks {}", report.backend, report.outcome, report.ticks);
    for g in &report.goals {
        println!("  [{}] {}", if g.holds { "x" } else { " " }, serde_json::to_string(&g.goal).unwrap_or_default());
    }
    println!("bus log sha256 {}", report.bus_log_hash);
    println!("logs in {}", dir.display());
    if report.outcome == RunOutcome::Completed && report.goals_met() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_SHORT)
    }
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, required_unless_present = "dataset")]
    pub scenario: Option<PathBuf>,
    /// Dataset directory with scenarios/ and cases.json.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

pub fn validate(args: ValidateArgs) -> ExitCode {
    if let Some(p) = &args.scenario {
        if let Err(code) = load_scenario(p) {
            return code;
        }
        println!("{}: ok", p.display());
    }
    if let Some(d) = &args.dataset {
        for file in ["cases.json", "replan_cases.json"] {
            if file == "replan_cases.json" && !d.join(file).exists() {
                continue;
            }
            match Dataset::load(d, file) {
                Ok(ds) => println!("{}: {} cases over {} scenarios", d.join(file).display(), ds.cases.len(), ds.scenarios.len()),
                Err(e) => return invalid(e),
            }
        }
    }
    ExitCode::SUCCESS
}
