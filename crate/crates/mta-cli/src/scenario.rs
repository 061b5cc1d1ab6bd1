//! The `scenario` command: an end-to-end simulation study.
//!
//! For each dataset: simulate, fit the scenario's model spec, attribute
//! credit with the fitted model, and compute ICPE against the unexposed
//! group. Coefficients are then summarized across datasets (mean and
//! empirical 95% interval on the exp scale) next to their ground truth,
//! in the layout of the published scenario tables.

use std::io::Write;
use std::process::ExitCode;

use rayon::prelude::*;
use serde::Serialize;

use mta::estimation::{self, quantile_type7, FitConfig, KeySummary};
use mta::evaluation;
use mta::intensity::{CoefKey, IntensityModel};
use mta::simulator::{
    scenario_fit_spec, scenario_ground_truth, simulate_dataset, Scenario, ScenarioConfig,
    UnexposedMode,
};

use crate::commands::{create, CliError, EXIT_NUMERICAL};
use crate::ScenarioArgs;

#[derive(Serialize)]
struct CoefficientRow {
    key: String,
    ground_truth: f64,
    mean: f64,
    ci_low: f64,
    ci_high: f64,
    replicates: usize,
}

#[derive(Serialize)]
struct MetricSummary {
    mean: f64,
    ci_low: f64,
    ci_high: f64,
}

#[derive(Serialize)]
struct OffsetRow {
    key: String,
    mean_days: f64,
}

#[derive(Serialize)]
struct ScenarioReport {
    schema: &'static str,
    scenario: String,
    users: usize,
    datasets: usize,
    seed: u64,
    window_days: f64,
    unexposed_fraction: f64,
    rule: &'static str,
    coefficients: Vec<CoefficientRow>,
    aicpe: MetricSummary,
    icpe: MetricSummary,
    offsets: Vec<OffsetRow>,
    unconverged_datasets: Vec<usize>,
}

struct DatasetOutcome {
    index: usize,
    model: IntensityModel,
    converged: bool,
    offsets: std::collections::BTreeMap<CoefKey, f64>,
    aicpe: f64,
    icpe: f64,
}

fn summarize(values: &mut [f64]) -> MetricSummary {
    values.sort_by(f64::total_cmp);
    MetricSummary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        ci_low: quantile_type7(values, 0.025),
        ci_high: quantile_type7(values, 0.975),
    }
}

pub fn run(args: ScenarioArgs) -> Result<ExitCode, CliError> {
    let scenario = Scenario::from_id(&args.id)
        .ok_or_else(|| CliError::usage(format!("unknown scenario id {:?} (use 1-4)", args.id)))?;
    let config = ScenarioConfig::new(scenario.clone(), args.users, args.datasets)?
        .with_seed(args.seed)
        .with_unexposed(UnexposedMode::Independent { fraction: args.unexposed_fraction });
    let fit_spec = scenario_fit_spec(&scenario)?;
    let fit_config = FitConfig { ridge_penalty: args.ridge, ..FitConfig::default() };
    let rule = args.rule.to_rule();

    let outcomes: Vec<DatasetOutcome> = (0..config.datasets)
        .into_par_iter()
        .map(|index| -> Result<DatasetOutcome, mta::Error> {
            let data = simulate_dataset(&config, index)?;
            let fit = estimation::fit(&fit_spec, data.exposed(), &fit_config)?;
            let aicpe = evaluation::aicpe(&fit.model, data.exposed(), rule, false)?;
            let icpe = evaluation::icpe(data.exposed(), data.unexposed())?;
            eprintln!(
                "dataset {index}: converged={} aicpe={aicpe:.4} icpe={icpe:.4}",
                fit.converged
            );
            Ok(DatasetOutcome {
                index,
                model: fit.model,
                converged: fit.converged,
                offsets: fit.per_key_offset,
                aicpe,
                icpe,
            })
        })
        .collect::<Result<_, _>>()?;

    let unconverged: Vec<usize> =
        outcomes.iter().filter(|o| !o.converged).map(|o| o.index).collect();
    let models: Vec<IntensityModel> = outcomes.iter().map(|o| o.model.clone()).collect();
    let summary = estimation::replicate_summary(&models)?;
    let truth = scenario_ground_truth(&scenario)?;

    let coefficients: Vec<CoefficientRow> = summary
        .iter()
        .map(|(key, s): (&CoefKey, &KeySummary)| CoefficientRow {
            key: key.to_string(),
            ground_truth: truth.get(key).copied().unwrap_or(f64::NAN),
            mean: s.mean,
            ci_low: s.q_low,
            ci_high: s.q_high,
            replicates: s.replicates,
        })
        .collect();

    let mut offset_totals: std::collections::BTreeMap<CoefKey, (f64, usize)> = Default::default();
    for o in &outcomes {
        for (key, days) in &o.offsets {
            let entry = offset_totals.entry(key.clone()).or_insert((0.0, 0));
            entry.0 += days;
            entry.1 += 1;
        }
    }
    let offsets: Vec<OffsetRow> = offset_totals
        .iter()
        .map(|(key, (total, n))| OffsetRow {
            key: key.to_string(),
            mean_days: total / *n as f64,
        })
        .collect();

    let mut aicpe_values: Vec<f64> = outcomes.iter().map(|o| o.aicpe).collect();
    let mut icpe_values: Vec<f64> = outcomes.iter().map(|o| o.icpe).collect();
    let report = ScenarioReport {
        schema: "mta-scenario-report/1",
        scenario: args.id.clone(),
        users: args.users,
        datasets: args.datasets,
        seed: args.seed,
        window_days: config.window_days,
        unexposed_fraction: args.unexposed_fraction,
        rule: match rule {
            mta::attribution::CreditRule::BackwardsElimination => "backwards_elimination",
            mta::attribution::CreditRule::Shapley => "shapley",
        },
        coefficients,
        aicpe: summarize(&mut aicpe_values),
        icpe: summarize(&mut icpe_values),
        offsets,
        unconverged_datasets: unconverged.clone(),
    };

    std::fs::create_dir_all(&args.out).map_err(CliError::from)?;
    let json_path = args.out.join("scenario_report.json");
    let mut sink = create(&json_path)?;
    serde_json::to_writer_pretty(&mut sink, &report)
        .map_err(|e| CliError::data(e.to_string()))?;
    sink.write_all(b"\n").map_err(CliError::from)?;
    sink.flush().map_err(CliError::from)?;

    let csv_path = args.out.join("scenario_table.csv");
    let mut sink = create(&csv_path)?;
    write_table_csv(&mut sink, &report).map_err(CliError::from)?;
    sink.flush().map_err(CliError::from)?;

    print_table(&report);
    if !unconverged.is_empty() {
        eprintln!("error: {} dataset fit(s) did not converge: {unconverged:?}", unconverged.len());
        return Ok(ExitCode::from(EXIT_NUMERICAL));
    }
    Ok(ExitCode::SUCCESS)
}

fn write_table_csv(sink: &mut impl Write, report: &ScenarioReport) -> std::io::Result<()> {
    writeln!(sink, "row,key,ground_truth,mean,ci_low,ci_high")?;
    for c in &report.coefficients {
        writeln!(
            sink,
            "coefficient,{},{},{},{},{}",
            c.key, c.ground_truth, c.mean, c.ci_low, c.ci_high
        )?;
    }
    writeln!(
        sink,
        "metric,aicpe,,{},{},{}",
        report.aicpe.mean, report.aicpe.ci_low, report.aicpe.ci_high
    )?;
    writeln!(
        sink,
        "metric,icpe,,{},{},{}",
        report.icpe.mean, report.icpe.ci_low, report.icpe.ci_high
    )?;
    for o in &report.offsets {
        writeln!(sink, "offset,{},,{},,", o.key, o.mean_days)?;
    }
    Ok(())
}

fn print_table(report: &ScenarioReport) {
    println!(
        "Scenario {} ({} users x {} datasets, seed {})",
        report.scenario, report.users, report.datasets, report.seed
    );
    println!("{:<28} {:>12} {:>10} {:>22}", "key", "ground truth", "mean", "CI [p2.5, p97.5]");
    for c in &report.coefficients {
        println!(
            "{:<28} {:>12.4} {:>10.4} {:>22}",
            c.key,
            c.ground_truth,
            c.mean,
            format!("[{:.4}, {:.4}]", c.ci_low, c.ci_high)
        );
    }
    let pct = |m: &MetricSummary| {
        format!(
            "{:.2}% [{:.2}%, {:.2}%]",
            100.0 * m.mean,
            100.0 * m.ci_low,
            100.0 * m.ci_high
        )
    };
    println!("AICPE: {}", pct(&report.aicpe));
    println!("ICPE:  {}", pct(&report.icpe));
}
