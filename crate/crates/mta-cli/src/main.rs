//! `mta`: simulate, fit, attribute, and evaluate attribution pipelines.
//!
//! Every command is a pure function of its flags, input files, and seed:
//! re-running with identical inputs produces byte-identical outputs, at any
//! `--workers` setting. Exit codes: 0 success, 2 usage, 3 numerical
//! (non-convergence), 4 data/schema.

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod scenario;

use commands::CliError;

#[derive(Parser)]
#[command(name = "mta", version, about = "Multi-touch attribution pipelines")]
struct Cli {
    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic path datasets.
    Simulate(SimulateArgs),
    /// Fit an intensity model to a path file by maximum likelihood.
    Fit(FitArgs),
    /// Assign per-conversion credit under a fitted model.
    Attribute(AttributeArgs),
    /// Compute incrementality metrics from corpora, credits, and models.
    Evaluate(EvaluateArgs),
    /// Reproduce a full simulation study: simulate, fit per dataset,
    /// summarize coefficients, attribute, and compare AICPE to ICPE.
    Scenario(ScenarioArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario id: 1, 2, 3, 4, or "custom" (requires --spec).
    #[arg(long)]
    scenario: String,
    /// Custom-scenario JSON document (mta-scenario/1).
    #[arg(long)]
    spec: Option<std::path::PathBuf>,
    #[arg(long)]
    users: usize,
    #[arg(long, default_value_t = 1)]
    datasets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30.0)]
    window_days: f64,
    /// Additional unexposed (ads withheld) users as a fraction of --users.
    #[arg(long, default_value_t = 0.0, conflicts_with = "unexposed_paired")]
    unexposed_fraction: f64,
    /// One unexposed twin per exposed user, sharing its query skeleton.
    #[arg(long, default_value_t = false)]
    unexposed_paired: bool,
    /// Output directory for ds*.jsonl and manifest.json.
    #[arg(long)]
    out: std::path::PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Input paths file (mta-paths/1 JSON Lines).
    #[arg(long)]
    paths: std::path::PathBuf,
    /// Model spec JSON ({"intercept_features": [...], "terms": [...],
    /// "reference_levels": {...}}).
    #[arg(long)]
    spec: std::path::PathBuf,
    /// Output model file (mta-model/1).
    #[arg(long)]
    out: std::path::PathBuf,
    /// Fit report output (fit-report/1); default: <out>.report.json.
    #[arg(long)]
    report: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-8)]
    gradient_tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Backwards,
    Shapley,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizationArg {
    Raw,
    Normalized,
    NonBaseline,
}

#[derive(Args)]
struct AttributeArgs {
    /// Fitted model (mta-model/1).
    #[arg(long)]
    model: std::path::PathBuf,
    /// Paths to attribute (mta-paths/1).
    #[arg(long)]
    paths: std::path::PathBuf,
    #[arg(long, value_enum, default_value_t = RuleArg::Backwards)]
    rule: RuleArg,
    #[arg(long, value_enum, default_value_t = NormalizationArg::Normalized)]
    normalization: NormalizationArg,
    /// Keep query effects in full while removing ads (experiment models).
    #[arg(long, default_value_t = false)]
    incremental: bool,
    #[arg(long, default_value_t = mta::attribution::DEFAULT_SHAPLEY_MAX_ADS)]
    shapley_max_ads: usize,
    /// Output credit file (mta-credit/1 JSON Lines).
    #[arg(long)]
    out: std::path::PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Exposed-group paths (mta-paths/1).
    #[arg(long)]
    exposed: std::path::PathBuf,
    /// Unexposed-group paths (mta-paths/1).
    #[arg(long)]
    unexposed: std::path::PathBuf,
    /// Credit file for AICPE (mta-credit/1, normalized credits).
    #[arg(long)]
    credits: Option<std::path::PathBuf>,
    /// Fitted model for PICPU/PICPPE (mta-model/1).
    #[arg(long)]
    model: Option<std::path::PathBuf>,
    /// Bootstrap replicates for CI on the ground-truth metrics (0 = none).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also slice the ground-truth metrics by this user feature.
    #[arg(long)]
    slice: Option<String>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
    #[arg(long)]
    out: std::path::PathBuf,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario id: 1, 2, 3, or 4.
    #[arg(long)]
    id: String,
    #[arg(long, default_value_t = 200_000)]
    users: usize,
    #[arg(long, default_value_t = 50)]
    datasets: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    unexposed_fraction: f64,
    #[arg(long, value_enum, default_value_t = RuleArg::Backwards)]
    rule: RuleArg,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    /// Output directory for scenario_report.json and scenario_table.csv.
    #[arg(long)]
    out: std::path::PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        // Outputs are worker-count independent; this only bounds CPU use.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    }
    let result = match cli.command {
        Command::Simulate(args) => commands::simulate(args),
        Command::Fit(args) => commands::fit(args),
        Command::Attribute(args) => commands::attribute(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Scenario(args) => scenario::run(args),
    };
    match result {
        Ok(code) => code,
        Err(CliError { exit_code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(exit_code)
        }
    }
}
