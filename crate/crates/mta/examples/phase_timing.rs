use mta::estimation::{fit, FitConfig};
use mta::evaluation::{aicpe, icpe};
use mta::attribution::CreditRule;
use mta::simulator::*;
use std::time::Instant;

fn run(scenario: Scenario, users: usize, fraction: f64) {
    let id = scenario.id().to_string();
    let config = ScenarioConfig::new(scenario.clone(), users, 1)
        .unwrap()
        .with_seed(1)
        .with_unexposed(UnexposedMode::Independent { fraction });
    let t0 = Instant::now();
    let data = simulate_dataset(&config, 0).unwrap();
    let t1 = Instant::now();
    let spec = scenario_fit_spec(&scenario).unwrap();
    let fitres = fit(&spec, data.exposed(), &FitConfig::default()).unwrap();
    let t2 = Instant::now();
    let a = aicpe(&fitres.model, data.exposed(), CreditRule::BackwardsElimination, false).unwrap();
    let t3 = Instant::now();
    let i = if fraction > 0.0 { icpe(data.exposed(), data.unexposed()).unwrap() } else { f64::NAN };
    let t4 = Instant::now();
    println!(
        "S{id} users={users}: sim {:?}  fit {:?} ({} iters, conv={})  aicpe {:?} ({a:.4})  icpe {:?} ({i:.4})",
        t1 - t0, t2 - t1, fitres.iterations, fitres.converged, t3 - t2, t4 - t3
    );
}

fn main() {
    run(Scenario::S4, 50_000, 0.0);
    run(Scenario::S1, 50_000, 0.0);
    run(Scenario::S1, 50_000, 0.0);
    run(Scenario::S1, 50_000, 0.5);
    run(Scenario::S2, 50_000, 0.0);
}
