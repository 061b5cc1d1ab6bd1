//! Command implementations: simulate, fit, attribute, evaluate.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use serde::Serialize;

use mta::attribution::{self, CreditRule, Normalization};
use mta::error::Error;
use mta::estimation::{self, FitConfig};
use mta::evaluation::{self, MetricKind, MetricReport, Report};
use mta::events::{self, PATHS_SCHEMA};
use mta::intensity::{CoefKey, IntensityModel, ModelSpec};
use mta::simulator::{
    simulate_dataset, CustomScenario, Manifest, ManifestEntry, Scenario, ScenarioConfig,
    UnexposedMode, MANIFEST_SCHEMA,
};

use crate::{
    AttributeArgs, EvaluateArgs, FitArgs, FormatArg, NormalizationArg, RuleArg, SimulateArgs,
};

pub struct CliError {
    pub exit_code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_DATA: u8 = 4;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { exit_code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { exit_code: EXIT_DATA, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let exit_code = match e {
            Error::InvalidConfig(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self { exit_code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl RuleArg {
    pub fn to_rule(self) -> CreditRule {
        match self {
            RuleArg::Backwards => CreditRule::BackwardsElimination,
            RuleArg::Shapley => CreditRule::Shapley,
        }
    }
}

impl NormalizationArg {
    fn to_normalization(self) -> Normalization {
        match self {
            NormalizationArg::Raw => Normalization::Raw,
            NormalizationArg::Normalized => Normalization::Normalized,
            NormalizationArg::NonBaseline => Normalization::NonBaselineNormalized,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<Vec<mta::events::UserPath>, CliError> {
    Ok(events::load_paths(open(path)?, PATHS_SCHEMA)?)
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut sink = create(path)?;
    serde_json::to_writer_pretty(&mut sink, value)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    sink.write_all(b"\n")?;
    sink.flush()?;
    Ok(())
}

pub fn parse_scenario(
    id: &str,
    custom_spec: Option<&Path>,
) -> Result<Scenario, CliError> {
    if id == "custom" {
        let path = custom_spec
            .ok_or_else(|| CliError::usage("--scenario custom requires --spec FILE"))?;
        return Ok(Scenario::Custom(CustomScenario::from_json_reader(open(path)?)?));
    }
    if custom_spec.is_some() {
        return Err(CliError::usage("--spec is only valid with --scenario custom"));
    }
    Scenario::from_id(id)
        .ok_or_else(|| CliError::usage(format!("unknown scenario {id:?} (use 1-4 or custom)")))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn simulate(args: SimulateArgs) -> Result<ExitCode, CliError> {
    let scenario = parse_scenario(&args.scenario, args.spec.as_deref())?;
    let unexposed = if args.unexposed_paired {
        UnexposedMode::Paired
    } else {
        UnexposedMode::Independent { fraction: args.unexposed_fraction }
    };
    let config = ScenarioConfig::new(scenario, args.users, args.datasets)?
        .with_seed(args.seed)
        .with_window_days(args.window_days)
        .with_unexposed(unexposed);

    std::fs::create_dir_all(&args.out)?;
    let mut files = Vec::with_capacity(config.datasets);
    for index in 0..config.datasets {
        let data = simulate_dataset(&config, index)?;
        let exposed_name = format!("ds{index}.jsonl");
        let mut sink = create(&args.out.join(&exposed_name))?;
        events::write_paths(&mut sink, data.exposed())?;
        sink.flush()?;
        let unexposed_name = if data.unexposed().is_empty() {
            None
        } else {
            let name = format!("ds{index}_unexposed.jsonl");
            let mut sink = create(&args.out.join(&name))?;
            events::write_paths(&mut sink, data.unexposed())?;
            sink.flush()?;
            Some(name)
        };
        eprintln!(
            "dataset {index}: {} exposed, {} unexposed users",
            data.exposed().len(),
            data.unexposed().len()
        );
        files.push(ManifestEntry { index, exposed: exposed_name, unexposed: unexposed_name });
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.to_string(),
        scenario: config.scenario.id().to_string(),
        users: config.users,
        window_days: config.window_days,
        datasets: config.datasets,
        seed: config.seed,
        unexposed: config.unexposed,
        files,
    };
    write_json_file(&args.out.join("manifest.json"), &manifest)?;
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct KeyOffset {
    key: CoefKey,
    offset_days: f64,
}

#[derive(Serialize)]
struct FitReport {
    schema: &'static str,
    converged: bool,
    iterations: usize,
    final_log_likelihood: f64,
    objective_trace: Vec<f64>,
    per_key_offset: Vec<KeyOffset>,
    dropped_keys: Vec<CoefKey>,
    floored_keys: Vec<CoefKey>,
    warnings: Vec<String>,
}

pub fn fit(args: FitArgs) -> Result<ExitCode, CliError> {
    let spec: ModelSpec = serde_json::from_reader(open(&args.spec)?)
        .map_err(|e| CliError::data(format!("{}: {e}", args.spec.display())))?;
    spec.validate()?;
    let corpus = load_corpus(&args.paths)?;
    if corpus.is_empty() {
        return Err(CliError::data(format!("{}: empty corpus", args.paths.display())));
    }
    let config = FitConfig {
        max_iterations: args.max_iterations,
        gradient_tolerance: args.gradient_tolerance,
        ridge_penalty: args.ridge,
        ..FitConfig::default()
    };
    let result = estimation::fit(&spec, &corpus, &config)?;

    let mut sink = create(&args.out)?;
    result.model.to_json_writer(&mut sink)?;
    sink.write_all(b"\n")?;
    sink.flush()?;

    let report_path = args
        .report
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    let report = FitReport {
        schema: "fit-report/1",
        converged: result.converged,
        iterations: result.iterations,
        final_log_likelihood: result.final_log_likelihood,
        objective_trace: result.objective_trace.clone(),
        per_key_offset: result
            .per_key_offset
            .iter()
            .map(|(key, offset)| KeyOffset { key: key.clone(), offset_days: *offset })
            .collect(),
        dropped_keys: result.dropped_keys.clone(),
        floored_keys: result.floored_keys.clone(),
        warnings: result.warnings.clone(),
    };
    write_json_file(&report_path, &report)?;

    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    if !result.converged {
        eprintln!(
            "error: fit did not converge within {} iterations (report at {})",
            args.max_iterations,
            report_path.display()
        );
        return Ok(ExitCode::from(EXIT_NUMERICAL));
    }
    eprintln!(
        "converged in {} iterations; log-likelihood {:.6}",
        result.iterations, result.final_log_likelihood
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// attribute
// ---------------------------------------------------------------------------

pub fn attribute(args: AttributeArgs) -> Result<ExitCode, CliError> {
    let model = IntensityModel::from_json_reader(open(&args.model)?)?;
    let corpus = load_corpus(&args.paths)?;
    let records = attribution::attribute_corpus(
        &model,
        &corpus,
        args.rule.to_rule(),
        args.normalization.to_normalization(),
        args.incremental,
        args.shapley_max_ads,
    )?;
    let mut sink = create(&args.out)?;
    attribution::write_credits(&mut sink, &records)?;
    sink.flush()?;
    eprintln!("attributed {} conversions", records.len());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn evaluate(args: EvaluateArgs) -> Result<ExitCode, CliError> {
    let exposed = load_corpus(&args.exposed)?;
    let unexposed = load_corpus(&args.unexposed)?;
    let mut metrics: Vec<MetricReport> = Vec::new();

    let base: [(MetricKind, fn(&[&_], &[&_]) -> mta::Result<f64>); 4] = [
        (MetricKind::Icpu, evaluation::icpu_refs),
        (MetricKind::Icpt, evaluation::icpt_refs),
        (MetricKind::Icpe, evaluation::icpe_refs),
        (MetricKind::IcpePrime, evaluation::icpe_prime_refs),
    ];
    for (kind, metric) in base {
        let e: Vec<&_> = exposed.iter().collect();
        let u: Vec<&_> = unexposed.iter().collect();
        let point = metric(&e, &u)?;
        let mut report = MetricReport::point_only(kind, point);
        if args.bootstrap >= 2 {
            let (lo, hi) =
                evaluation::bootstrap_ci(metric, &exposed, &unexposed, args.bootstrap, args.seed)?;
            report.ci_low = Some(lo);
            report.ci_high = Some(hi);
            report.bootstrap_replicates = args.bootstrap;
        }
        metrics.push(report);
        if let Some(feature) = &args.slice {
            let bootstrap = (args.bootstrap >= 2).then_some((args.bootstrap, args.seed));
            metrics.extend(evaluation::sliced_metrics(
                kind, metric, &exposed, &unexposed, feature, bootstrap,
            )?);
        }
    }

    if let Some(model_path) = &args.model {
        let model = IntensityModel::from_json_reader(open(model_path)?)?;
        let predicted = evaluation::predicted_metrics(&model, &exposed, &unexposed)?;
        metrics.push(MetricReport::point_only(MetricKind::Picpu, predicted.picpu));
        metrics.push(MetricReport::point_only(MetricKind::Picppe, predicted.picppe));
    }

    if let Some(credits_path) = &args.credits {
        let records = attribution::read_credits(open(credits_path)?)?;
        let aicpe = evaluation::aicpe_from_credits(&records)?;
        metrics.push(MetricReport::point_only(MetricKind::Aicpe, aicpe));
    }

    let report = Report::new(metrics);
    let mut sink = create(&args.out)?;
    match args.format {
        FormatArg::Json => report.write_json(&mut sink)?,
        FormatArg::Csv => report.write_csv(&mut sink)?,
    }
    sink.flush()?;
    eprintln!("wrote {} metric rows to {}", report.metrics.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}
