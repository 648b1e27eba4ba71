use std::path::PathBuf;
use std::process::ExitCode;

use clap::Args;
use comuros_core::benchmark::{run_benchmark, run_replan_benchmark, BenchOptions, Dataset};
use comuros_core::manager::DEFAULT_RULES;
use comuros_core::planner::{make_planner, BackendError, Planner};
use comuros_core::runtime::Scenario;

use crate::{invalid, BackendArg, EXIT_SHORT};

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory holding scenarios/, cases.json and replan_cases.json.
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub backend: BackendArg,
    #[arg(long, default_value_t = 5)]
    pub iterations: u32,
    /// Run the two-phase replanning benchmark instead.
    #[arg(long)]
    pub replan: bool,
    /// Also score paraphrased prompts.
    #[arg(long)]
    pub paraphrases: bool,
    /// Exit 1 if any overall metric mean is below this.
    #[arg(long, default_value_t = 0.0)]
    pub floor: f64,
    /// Report directory; defaults to runs/bench.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn bench(args: BenchArgs) -> ExitCode {
    if !args.dataset.is_dir() {
        return invalid(format!("dataset directory {} not found", args.dataset.display()));
    }
    if args.iterations == 0 {
        return invalid("iterations must be at least 1");
    }
    let file = if args.replan { "replan_cases.json" } else { "cases.json" };
    let dataset = match Dataset::load(&args.dataset, file) {
        Ok(d) => d,
        Err(e) => return invalid(e),
    };
    let backend = match args.backend.load() {
        Ok(b) => b,
        Err(e) => return invalid(e),
    };
    let factory = |s: &Scenario| -> Result<Box<dyn Planner>, BackendError> {
        make_planner(&backend, &s.config, &s.planning, DEFAULT_RULES)
    };
    let report = if args.replan {
        run_replan_benchmark(&dataset, &factory, args.iterations)
    } else {
        run_benchmark(&dataset, &factory, BenchOptions { iterations: args.iterations, paraphrases: args.paraphrases })
    };

    let out = args.out.unwrap_or_else(|| crate::default_out("bench"));
    let name = if args.replan { "replan_report" } else { "bench_report" };
    let written = std::fs::create_dir_all(&out)
        .and_then(|_| std::fs::write(out.join(format!("{name}.json")), serde_json::to_string_pretty(&report)?))
        .and_then(|_| std::fs::write(out.join(format!("{name}.txt")), report.render_table()));
    if let Err(e) = written {
        eprintln!("error: writing report to {}: {e}", out.display());
    }
    print!("{}", report.render_table());
    let short = report.below_floor(args.floor);
    for s in &short {
        eprintln!("floor: {s}");
    }
    if short.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_SHORT)
    }
}
