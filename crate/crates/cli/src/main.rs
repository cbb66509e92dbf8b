//! `safeplan`: run scenarios and batteries, write traces and comparison tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use safeplan_core::sim::{
    apply_override, generate_battery, run_battery, summarize, BatteryError, ModeRow, ScenarioFile, SimError,
    SlackProfile,
};
use safeplan_core::{run_scenario, PlannerConfig, PlannerMode, Scenario, SimSummary};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "safeplan", version, about = "Safety-filtered diffusion planning on a driving micro-simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file closed loop and write its trace and summary.
    Run(RunArgs),
    /// Run a scenario battery under several planner modes and tabulate the results.
    Battery(BatteryArgs),
    /// Average slack activation rate per denoising step over a battery.
    SlackProfile(SlackArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long, env = "SAFEPLAN_OUT", default_value = "safeplan-out")]
    out: PathBuf,
    /// Parameter override, `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Planner mode; defaults to the scenario file's, then `full`.
    #[arg(long)]
    mode: Option<PlannerMode>,
    /// Scenario seed; defaults to the scenario file's.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BatteryArgs {
    /// Battery name: headon, crossing, merge, hardbrake, empty or all.
    #[arg(long)]
    name: String,
    /// Comma-separated planner modes.
    #[arg(long, value_delimiter = ',', default_value = "full,post_hoc_only,arc_reparam,unfiltered")]
    modes: Vec<PlannerMode>,
    /// Number of seeded variants per battery.
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SlackArgs {
    #[arg(long)]
    name: String,
    #[arg(long, default_value = "full")]
    mode: PlannerMode,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    common: Common,
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    /// Bad input: unreadable scenario, unknown key or battery, unwritable output.
    User(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::User(_) => 2,
            Failure::Internal(_) => 1,
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Scenario(e) => Failure::User(e.to_string()),
            SimError::Planner(e) => Failure::Internal(e.to_string()),
        }
    }
}

impl From<BatteryError> for Failure {
    fn from(e: BatteryError) -> Self {
        match e {
            BatteryError::UnknownBattery(_) => Failure::User(e.to_string()),
            BatteryError::Pool(_) => Failure::Internal(e.to_string()),
            BatteryError::Sim(e) => e.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Battery(args) => cmd_battery(args),
        Command::SlackProfile(args) => cmd_slack_profile(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::User(msg) | Failure::Internal(msg)) = &failure;
            eprintln!("error: {msg}");
            ExitCode::from(failure.code())
        }
    }
}

fn apply_all(scenario: &mut Scenario, config: &mut PlannerConfig, overrides: &[String]) -> Result<(), Failure> {
    for item in overrides {
        apply_override(scenario, config, item).map_err(|e| Failure::User(e.to_string()))?;
    }
    Ok(())
}

/// Battery-wide overrides: scenario keys apply to every generated variant.
fn battery_config(scenarios: &mut [Scenario], overrides: &[String]) -> Result<PlannerConfig, Failure> {
    let mut config = PlannerConfig::default();
    for (i, scenario) in scenarios.iter_mut().enumerate() {
        let mut planner = PlannerConfig::default();
        apply_all(scenario, &mut planner, overrides)?;
        if i == 0 {
            config = planner;
        }
    }
    Ok(config)
}

fn jobs(requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::User(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Failure::User(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

#[derive(Serialize)]
struct RunReport<'a> {
    summary: &'a SimSummary,
    scenario: &'a Scenario,
    planner: &'a PlannerConfig,
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let file = ScenarioFile::load(&args.scenario).map_err(|e| Failure::User(e.to_string()))?;
    let mut scenario = file.scenario;
    let mut config = file.planner.unwrap_or_default();
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    apply_all(&mut scenario, &mut config, &args.common.overrides)?;

    let result = run_scenario(&scenario, &config)?;
    let out = &args.common.out;
    write_file(out, "trace.ndjson", &result.to_ndjson())?;
    let report = RunReport { summary: &result.summary, scenario: &scenario, planner: &config };
    write_file(out, "summary.json", &to_json(&report)?)?;

    let s = &result.summary;
    let min_h = s.min_h.map_or("none".to_string(), |h| format!("{h:.3}"));
    println!(
        "{} mode={} seed={} collided={} min_h={} composite={:.3}",
        s.scenario, s.mode, s.seed, s.collided, min_h, s.composite
    );
    Ok(())
}

#[derive(Serialize)]
struct BatteryReport<'a> {
    battery: &'a str,
    seeds: u64,
    rows: &'a [ModeRow],
    planner: &'a PlannerConfig,
    runs: &'a [SimSummary],
}

fn format_table(name: &str, seeds: u64, rows: &[ModeRow]) -> String {
    let mut out = format!("battery {name}, {seeds} seeds\n");
    let _ = writeln!(
        out,
        "{:<20} {:>5} {:>10} {:>16} {:>14} {:>16}",
        "mode", "runs", "collisions", "collision_rate_%", "mean_composite", "mean_slack_rate"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<20} {:>5} {:>10} {:>16.2} {:>14.4} {:>16.4}",
            r.mode.as_str(),
            r.runs,
            r.collisions,
            r.collision_rate,
            r.mean_composite,
            r.mean_final_slack_rate
        );
    }
    out
}

fn cmd_battery(args: BatteryArgs) -> Result<(), Failure> {
    let mut scenarios = generate_battery(&args.name, args.seeds as usize)?;
    let config = battery_config(&mut scenarios, &args.common.overrides)?;
    let mut modes = Vec::new();
    for mode in args.modes {
        if !modes.contains(&mode) {
            modes.push(mode);
        }
    }
    let runs = run_battery(&scenarios, &modes, &config, jobs(args.jobs))?;
    let rows = summarize(&runs, &modes);

    let table = format_table(&args.name, args.seeds, &rows);
    let report = BatteryReport { battery: &args.name, seeds: args.seeds, rows: &rows, planner: &config, runs: &runs };
    let out = &args.common.out;
    write_file(out, &format!("battery_{}.txt", args.name), &table)?;
    write_file(out, &format!("battery_{}.json", args.name), &to_json(&report)?)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct SlackReport<'a> {
    battery: &'a str,
    seeds: u64,
    profile: &'a SlackProfile,
    planner: &'a PlannerConfig,
}

fn cmd_slack_profile(args: SlackArgs) -> Result<(), Failure> {
    let mut scenarios = generate_battery(&args.name, args.seeds as usize)?;
    let config = battery_config(&mut scenarios, &args.common.overrides)?;
    let mut modes = vec![args.mode];
    if args.mode != PlannerMode::PostHocOnly {
        modes.push(PlannerMode::PostHocOnly);
    }
    let runs = run_battery(&scenarios, &modes, &config, jobs(args.jobs))?;
    let (main, post_hoc): (Vec<SimSummary>, Vec<SimSummary>) = runs.into_iter().partition(|s| s.mode == args.mode);
    let post_hoc = if args.mode == PlannerMode::PostHocOnly { &main } else { &post_hoc };
    let profile = SlackProfile::from_runs(args.mode, &main, Some(post_hoc));

    // One row per denoising step, first step first. The post-hoc rate is a
    // single correction of the final sample, so it sits on the last row.
    let steps = profile.rates.len();
    let mut csv = String::from("index,t,rate,post_hoc_only_rate\n");
    for (i, rate) in profile.rates.iter().enumerate() {
        let post = match (i + 1 == steps, profile.post_hoc_rate) {
            (true, Some(p)) => p.to_string(),
            _ => String::new(),
        };
        let _ = writeln!(csv, "{i},{},{rate},{post}", steps - i);
    }
    let stem = format!("slack_profile_{}_{}", args.name, args.mode);
    let report = SlackReport { battery: &args.name, seeds: args.seeds, profile: &profile, planner: &config };
    let out = &args.common.out;
    write_file(out, &format!("{stem}.csv"), &csv)?;
    write_file(out, &format!("{stem}.json"), &to_json(&report)?)?;

    let first = profile.rates.first().copied().unwrap_or(0.0);
    let last = profile.rates.last().copied().unwrap_or(0.0);
    println!(
        "{} mode={} steps={steps} first={first:.4} last={last:.4} post_hoc_only={:.4}",
        args.name,
        args.mode,
        profile.post_hoc_rate.unwrap_or(0.0)
    );
    Ok(())
}
