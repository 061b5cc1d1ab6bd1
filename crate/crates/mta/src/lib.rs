//! Multi-touch attribution from inhomogeneous-Poisson conversion intensities.
//!
//! Conversions are modeled as occurrences of a Poisson counting process whose
//! log-intensity is linear in time-since-ad basis functions, ad/query features,
//! and user features. The crate covers the full pipeline:
//!
//! - [`events`] — the path/event data model and the `mta-paths/1` JSON Lines
//!   format;
//! - [`intensity`] — the log-linear intensity model, its evaluation under
//!   full or truncated ad sets, and segmentation of paths into
//!   constant-intensity intervals;
//! - [`estimation`] — maximum-likelihood Poisson regression over segments,
//!   fit diagnostics, and cross-dataset coefficient summaries;
//! - [`attribution`] — per-conversion credit assignment by backwards
//!   elimination or exact Shapley values, synergy decomposition, and
//!   expected-credit integrals;
//! - [`simulator`] — seeded synthetic corpora, including four built-in
//!   scenarios and counterfactual unexposed users;
//! - [`evaluation`] — incrementality metrics (ICPU/ICPT/ICPE and their
//!   predicted and attributed counterparts) with bootstrap confidence
//!   intervals.
//!
//! ```
//! use mta::prelude::*;
//!
//! // Simulate one small dataset, fit the matching model, attribute credit.
//! let config = ScenarioConfig::new(Scenario::S1, 500, 3)?.with_seed(7);
//! let data = simulate_dataset(&config, 0)?;
//! let fit = fit(scenario_fit_spec(Scenario::S1)?, data.exposed(), &FitConfig::default())?;
//! assert!(fit.converged);
//! # Ok::<(), mta::Error>(())
//! ```

pub mod attribution;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod events;
pub mod intensity;
pub mod simulator;

pub use error::{Error, Result};

/// Convenience re-exports for pipeline code.
pub mod prelude {
    pub use crate::attribution::{
        backwards_elimination, expected_credit, shapley, synergy, CreditAssignment, CreditRule,
        Normalization,
    };
    pub use crate::error::{Error, Result};
    pub use crate::estimation::{fit, log_likelihood, replicate_summary, FitConfig, FitResult};
    pub use crate::evaluation::{aicpe, bootstrap_ci, icpe, icpt, icpu, MetricReport};
    pub use crate::events::{
        load_paths, write_paths, Event, EventKind, FeatureValues, ObservationWindow, UserPath,
        PATHS_SCHEMA,
    };
    pub use crate::intensity::{
        segment_path, total_offset_by_key, AdSelection, BasisSpec, CoefKey, Conditioning,
        EffectKind, IntensityModel, ModelSpec, Segment, TermSpec,
    };
    pub use crate::simulator::{
        scenario_fit_spec, scenario_true_model, simulate_dataset, Scenario, ScenarioConfig,
    };
}

// Book chapters double as doc-tests so the guide's snippets stay honest.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(paths_and_events, "../../../book/src/paths-and-events.md");
    chapter!(intensity_model, "../../../book/src/intensity-model.md");
    chapter!(fitting, "../../../book/src/fitting.md");
    chapter!(attribution, "../../../book/src/attribution.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(simulation_scenarios, "../../../book/src/simulation-scenarios.md");
}
