//! Ground-truth and model-based incrementality metrics.
//!
//! With an exposed and an unexposed (ads withheld) group, incremental
//! conversions are measured directly: per user (ICPU), per unit of
//! observation time (ICPT), or per exposed conversion (ICPE, and the
//! time-weighted ICPE'). The model-predicted counterparts (PICPU, PICPPE)
//! replace conversions with predicted conversions, and AICPE is the mean
//! total normalized ad credit over exposed conversions. Confidence
//! intervals come from bootstrapping users within their groups.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    backwards_elimination, shapley_with_cap, CreditRecord, CreditRule, Normalization,
    DEFAULT_SHAPLEY_MAX_ADS,
};
use crate::error::{Error, Result};
use crate::estimation::quantile_type7;
use crate::events::UserPath;
use crate::intensity::{IntensityModel, Segmenter};

/// Schema identifier for metric reports.
pub const REPORT_SCHEMA: &str = "mta-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Icpu,
    Icpt,
    Icpe,
    IcpePrime,
    Picpu,
    Picppe,
    Aicpe,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MetricKind::Icpu => "icpu",
            MetricKind::Icpt => "icpt",
            MetricKind::Icpe => "icpe",
            MetricKind::IcpePrime => "icpe_prime",
            MetricKind::Picpu => "picpu",
            MetricKind::Picppe => "picppe",
            MetricKind::Aicpe => "aicpe",
        };
        f.write_str(s)
    }
}

/// A metric's slice context, when computed per user-feature level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub feature: String,
    pub level: String,
}

/// Point estimate with optional bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub point: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
    pub bootstrap_replicates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice: Option<Slice>,
}

impl MetricReport {
    pub fn point_only(metric: MetricKind, point: f64) -> Self {
        Self { metric, point, ci_low: None, ci_high: None, bootstrap_replicates: 0, slice: None }
    }
}

// ---------------------------------------------------------------------------
// Group aggregates
// ---------------------------------------------------------------------------

fn require_nonempty(name: &str, corpus: &[&UserPath]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyGroup(name.into()));
    }
    Ok(())
}

fn conversions(corpus: &[&UserPath]) -> f64 {
    corpus.iter().map(|p| p.conversion_times().len() as f64).sum()
}

fn observation_time(corpus: &[&UserPath]) -> f64 {
    corpus.iter().map(|p| p.window().length()).sum()
}

fn refs(corpus: &[UserPath]) -> Vec<&UserPath> {
    corpus.iter().collect()
}

/// [`icpu`] over borrowed sub-corpora, as bootstrap closures need.
pub fn icpu_refs(exposed: &[&UserPath], unexposed: &[&UserPath]) -> Result<f64> {
    require_nonempty("exposed", exposed)?;
    require_nonempty("unexposed", unexposed)?;
    Ok(conversions(exposed) / exposed.len() as f64
        - conversions(unexposed) / unexposed.len() as f64)
}

/// [`icpt`] over borrowed sub-corpora.
pub fn icpt_refs(exposed: &[&UserPath], unexposed: &[&UserPath]) -> Result<f64> {
    require_nonempty("exposed", exposed)?;
    require_nonempty("unexposed", unexposed)?;
    Ok(conversions(exposed) / observation_time(exposed)
        - conversions(unexposed) / observation_time(unexposed))
}

/// [`icpe`] over borrowed sub-corpora.
pub fn icpe_refs(exposed: &[&UserPath], unexposed: &[&UserPath]) -> Result<f64> {
    let icpu = icpu_refs(exposed, unexposed)?;
    let exposed_conversions = conversions(exposed);
    if exposed_conversions == 0.0 {
        return Err(Error::ZeroExposedConversions);
    }
    Ok(icpu * exposed.len() as f64 / exposed_conversions)
}

/// [`icpe_prime`] over borrowed sub-corpora.
pub fn icpe_prime_refs(exposed: &[&UserPath], unexposed: &[&UserPath]) -> Result<f64> {
    let icpt = icpt_refs(exposed, unexposed)?;
    let exposed_conversions = conversions(exposed);
    if exposed_conversions == 0.0 {
        return Err(Error::ZeroExposedConversions);
    }
    Ok(icpt * observation_time(exposed) / exposed_conversions)
}

/// Incremental conversions per user: the difference in mean conversions
/// between the exposed and unexposed groups.
pub fn icpu(exposed: &[UserPath], unexposed: &[UserPath]) -> Result<f64> {
    icpu_refs(&refs(exposed), &refs(unexposed))
}

/// Incremental conversions per unit of observation time.
pub fn icpt(exposed: &[UserPath], unexposed: &[UserPath]) -> Result<f64> {
    icpt_refs(&refs(exposed), &refs(unexposed))
}

/// Incremental conversions per exposed conversion: the fraction of exposed
/// conversions that are incremental.
pub fn icpe(exposed: &[UserPath], unexposed: &[UserPath]) -> Result<f64> {
    icpe_refs(&refs(exposed), &refs(unexposed))
}

/// ICPE with observation-time weighting; equals ICPE when every user is
/// observed equally long.
pub fn icpe_prime(exposed: &[UserPath], unexposed: &[UserPath]) -> Result<f64> {
    icpe_prime_refs(&refs(exposed), &refs(unexposed))
}

// ---------------------------------------------------------------------------
// Model-predicted metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedMetrics {
    pub picpu: f64,
    pub picppe: f64,
}

fn predicted_conversions(model: &IntensityModel, corpus: &[UserPath]) -> Result<f64> {
    let segmenter = Segmenter::for_model(model)?;
    let per_path: Vec<f64> = corpus
        .par_iter()
        .map(|p| {
            let segments = segmenter.segment(p)?;
            let mut total = 0.0;
            for s in &segments {
                total += model.segment_eta(s)?.exp() * s.exposure();
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    Ok(per_path.iter().sum())
}

/// PICPU and PICPPE: the incrementality metrics with conversions replaced
/// by the model's predicted conversions.
pub fn predicted_metrics(
    model: &IntensityModel,
    exposed: &[UserPath],
    unexposed: &[UserPath],
) -> Result<PredictedMetrics> {
    require_nonempty("exposed", &refs(exposed))?;
    require_nonempty("unexposed", &refs(unexposed))?;
    let pred_exposed = predicted_conversions(model, exposed)?;
    let pred_unexposed = predicted_conversions(model, unexposed)?;
    let picpu =
        pred_exposed / exposed.len() as f64 - pred_unexposed / unexposed.len() as f64;
    let picppe = picpu * exposed.len() as f64 / pred_exposed;
    Ok(PredictedMetrics { picpu, picppe })
}

/// Attributed incremental conversions per exposed conversion: the mean
/// total normalized ad credit over the exposed group's conversions.
pub fn aicpe(
    model: &IntensityModel,
    exposed: &[UserPath],
    rule: CreditRule,
    incremental: bool,
) -> Result<f64> {
    let per_path: Vec<(f64, usize)> = exposed
        .par_iter()
        .map(|p| {
            let n = p.conversion_times().len();
            let mut total = 0.0;
            for idx in 0..n {
                let assignment = match rule {
                    CreditRule::BackwardsElimination => {
                        backwards_elimination(model, p, idx, Normalization::Normalized, incremental)?
                            .0
                    }
                    CreditRule::Shapley => shapley_with_cap(
                        model,
                        p,
                        idx,
                        Normalization::Normalized,
                        incremental,
                        DEFAULT_SHAPLEY_MAX_ADS,
                    )?,
                };
                total += assignment.total_ad_credit();
            }
            Ok((total, n))
        })
        .collect::<Result<_>>()?;
    let total_credit: f64 = per_path.iter().map(|(c, _)| c).sum();
    let total_conversions: usize = per_path.iter().map(|(_, n)| n).sum();
    if total_conversions == 0 {
        return Err(Error::ZeroExposedConversions);
    }
    Ok(total_credit / total_conversions as f64)
}

/// AICPE from a pre-computed credit file; records must carry normalized
/// credits.
pub fn aicpe_from_credits(records: &[CreditRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::ZeroExposedConversions);
    }
    if records.iter().any(|r| r.normalization != Normalization::Normalized) {
        return Err(Error::InvalidQuery(
            "AICPE requires normalized credits; re-attribute with --normalization normalized"
                .into(),
        ));
    }
    let total: f64 = records.iter().map(CreditRecord::total_ad_credit).sum();
    Ok(total / records.len() as f64)
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

/// Percentile bootstrap over users: exposed and unexposed users are
/// resampled with replacement within their own groups; returns the
/// (2.5%, 97.5%) interval of the metric across replicates. Deterministic
/// per seed, independent of worker count.
pub fn bootstrap_ci<F>(
    metric: F,
    exposed: &[UserPath],
    unexposed: &[UserPath],
    replicates: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&[&UserPath], &[&UserPath]) -> Result<f64> + Sync,
{
    if replicates < 2 {
        return Err(Error::InvalidConfig("bootstrap needs at least 2 replicates".into()));
    }
    fn resample<'a>(corpus: &'a [UserPath], rng: &mut ChaCha8Rng) -> Vec<&'a UserPath> {
        (0..corpus.len()).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect()
    }
    let mut stats: Vec<f64> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r);
            let e = resample(exposed, &mut rng);
            let u = resample(unexposed, &mut rng);
            metric(&e, &u)
        })
        .collect::<Result<_>>()?;
    stats.sort_by(f64::total_cmp);
    Ok((quantile_type7(&stats, 0.025), quantile_type7(&stats, 0.975)))
}

// ---------------------------------------------------------------------------
// Slicing
// ---------------------------------------------------------------------------

/// Computes a metric per level of a user feature, with optional bootstrap
/// intervals. Only user features are accepted: slicing on path-derived
/// quantities (event counts and the like) confounds treatment with the
/// slice and is refused. Users lacking the feature fall into a `"(none)"`
/// level.
pub fn sliced_metrics<F>(
    kind: MetricKind,
    metric: F,
    exposed: &[UserPath],
    unexposed: &[UserPath],
    feature: &str,
    bootstrap: Option<(usize, u64)>,
) -> Result<Vec<MetricReport>>
where
    F: Fn(&[&UserPath], &[&UserPath]) -> Result<f64> + Sync,
{
    let is_user_feature = exposed
        .iter()
        .chain(unexposed)
        .any(|p| p.user_features().get(feature).is_some());
    if !is_user_feature {
        return Err(Error::NotAUserFeature(feature.to_string()));
    }

    let level_of = |p: &UserPath| p.user_features().get(feature).unwrap_or("(none)").to_string();
    let levels: BTreeSet<String> =
        exposed.iter().chain(unexposed).map(|p| level_of(p)).collect();

    let mut reports = Vec::new();
    for level in levels {
        let e: Vec<UserPath> =
            exposed.iter().filter(|p| level_of(p) == level).cloned().collect();
        let u: Vec<UserPath> =
            unexposed.iter().filter(|p| level_of(p) == level).cloned().collect();
        let point = metric(&refs(&e), &refs(&u))?;
        let (ci_low, ci_high, reps) = match bootstrap {
            Some((replicates, seed)) => {
                let (lo, hi) = bootstrap_ci(&metric, &e, &u, replicates, seed)?;
                (Some(lo), Some(hi), replicates)
            }
            None => (None, None, 0),
        };
        reports.push(MetricReport {
            metric: kind,
            point,
            ci_low,
            ci_high,
            bootstrap_replicates: reps,
            slice: Some(Slice { feature: feature.to_string(), level }),
        });
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Block jackknife (model-uncertainty variant; optional mode)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JackknifeReport {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub blocks: usize,
}

/// Leave-one-block-out refit: users are split into contiguous blocks, the
/// model is refitted without each block, and the metric's variability over
/// blocks gives a normal-approximation interval around the full-fit point.
/// Refits are expensive; this mode is off by default in the pipelines.
pub fn block_jackknife_ci<F>(
    spec: &crate::intensity::ModelSpec,
    fit_config: &crate::estimation::FitConfig,
    exposed: &[UserPath],
    unexposed: &[UserPath],
    blocks: usize,
    metric: F,
) -> Result<JackknifeReport>
where
    F: Fn(&IntensityModel, &[UserPath], &[UserPath]) -> Result<f64> + Sync,
{
    if blocks < 2 || blocks > exposed.len() {
        return Err(Error::InvalidConfig(format!(
            "blocks must be in [2, {}], got {blocks}",
            exposed.len()
        )));
    }
    let full_fit = crate::estimation::fit(spec, exposed, fit_config)?;
    let point = metric(&full_fit.model, exposed, unexposed)?;

    let block_of = |i: usize| i * blocks / exposed.len();
    let estimates: Vec<f64> = (0..blocks)
        .map(|b| {
            let held: Vec<UserPath> = exposed
                .iter()
                .enumerate()
                .filter(|(i, _)| block_of(*i) != b)
                .map(|(_, p)| p.clone())
                .collect();
            let fit = crate::estimation::fit(spec, &held, fit_config)?;
            metric(&fit.model, &held, unexposed)
        })
        .collect::<Result<_>>()?;
    let mean = estimates.iter().sum::<f64>() / blocks as f64;
    let var = (blocks as f64 - 1.0) / blocks as f64
        * estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>();
    let half = 1.96 * var.sqrt();
    Ok(JackknifeReport { point, ci_low: point - half, ci_high: point + half, blocks })
}

// ---------------------------------------------------------------------------
// Reports ("mta-report/1")
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub metrics: Vec<MetricReport>,
}

impl Report {
    pub fn new(metrics: Vec<MetricReport>) -> Self {
        Self { schema: REPORT_SCHEMA.to_string(), metrics }
    }

    pub fn write_json(&self, sink: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(sink, self)?;
        Ok(())
    }

    /// Flat CSV: metric, point, ci_low, ci_high, slice.
    pub fn write_csv(&self, sink: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["metric", "point", "ci_low", "ci_high", "slice"])
            .map_err(csv_err)?;
        for m in &self.metrics {
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let slice = m
                .slice
                .as_ref()
                .map(|s| format!("{}={}", s.feature, s.level))
                .unwrap_or_default();
            w.write_record([
                m.metric.to_string(),
                m.point.to_string(),
                fmt(m.ci_low),
                fmt(m.ci_high),
                slice,
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, FeatureValues, ObservationWindow};
    use crate::intensity::{CoefKey, ModelSpec};
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    fn path_with(id: &str, window_end: f64, conversions: usize) -> UserPath {
        let window = ObservationWindow::new(0.0, window_end).unwrap();
        let events = (0..conversions)
            .map(|i| Event::conversion(1.0 + i as f64 * 0.5))
            .collect();
        UserPath::new(id, window, FeatureValues::new(), events).unwrap()
    }

    fn corpus(prefix: &str, users: usize, window_end: f64, conv_per_user: &[usize]) -> Vec<UserPath> {
        (0..users)
            .map(|i| path_with(&format!("{prefix}{i}"), window_end, conv_per_user[i % conv_per_user.len()]))
            .collect()
    }

    #[test]
    fn icpu_hand_arithmetic() {
        // Exposed: 2 users, 3 conversions. Unexposed: 4 users, 2 conversions.
        let exposed = corpus("e", 2, 30.0, &[2, 1]);
        let unexposed = corpus("u", 4, 30.0, &[1, 1, 0, 0]);
        assert_abs_diff_eq!(icpu(&exposed, &unexposed).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn icpu_identical_groups_is_zero() {
        let exposed = corpus("e", 3, 30.0, &[1]);
        let unexposed = corpus("u", 3, 30.0, &[1]);
        assert_eq!(icpu(&exposed, &unexposed).unwrap(), 0.0);
    }

    #[test]
    fn empty_group_is_an_error() {
        let exposed = corpus("e", 2, 30.0, &[1]);
        assert!(matches!(icpu(&exposed, &[]), Err(Error::EmptyGroup(_))));
        assert!(matches!(icpu(&[], &exposed), Err(Error::EmptyGroup(_))));
    }

    #[test]
    fn icpt_equal_windows_is_icpu_over_window() {
        let exposed = corpus("e", 5, 30.0, &[2, 1, 1, 0, 3]);
        let unexposed = corpus("u", 4, 30.0, &[1, 0, 1, 1]);
        let icpu_v = icpu(&exposed, &unexposed).unwrap();
        let icpt_v = icpt(&exposed, &unexposed).unwrap();
        assert_abs_diff_eq!(icpt_v, icpu_v / 30.0, epsilon = 1e-12);
    }

    #[test]
    fn icpt_with_longer_unexposed_windows() {
        // Unexposed observed twice as long with equal counts: ICPT is
        // 3/(2*30) - 3/(2*60) per hand arithmetic, not ICPU/30.
        let exposed = corpus("e", 2, 30.0, &[2, 1]);
        let unexposed = corpus("u", 2, 60.0, &[2, 1]);
        let icpt_v = icpt(&exposed, &unexposed).unwrap();
        assert_abs_diff_eq!(icpt_v, 3.0 / 60.0 - 3.0 / 120.0, epsilon = 1e-12);
        let icpu_v = icpu(&exposed, &unexposed).unwrap();
        assert!((icpt_v - icpu_v / 30.0).abs() > 1e-6);
    }

    #[test]
    fn icpt_zero_conversions_everywhere() {
        let exposed = corpus("e", 3, 30.0, &[0]);
        let unexposed = corpus("u", 3, 30.0, &[0]);
        assert_eq!(icpt(&exposed, &unexposed).unwrap(), 0.0);
    }

    #[test]
    fn icpe_hand_corpus() {
        // ICPU = 0.5 with 10 exposed users and 20 exposed conversions
        // gives ICPE = 0.5 * 10 / 20 = 0.25.
        let exposed = corpus("e", 10, 30.0, &[2]);
        let unexposed = corpus("u", 10, 30.0, &[2, 1]); // mean 1.5
        assert_abs_diff_eq!(icpu(&exposed, &unexposed).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(icpe(&exposed, &unexposed).unwrap(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn icpe_equal_rates_is_zero_and_matches_prime_on_equal_windows() {
        let exposed = corpus("e", 4, 30.0, &[1]);
        let unexposed = corpus("u", 8, 30.0, &[1]);
        assert_abs_diff_eq!(icpe(&exposed, &unexposed).unwrap(), 0.0, epsilon = 1e-12);
        let e2 = corpus("e", 6, 30.0, &[2, 1, 0]);
        let u2 = corpus("u", 9, 30.0, &[1, 0, 0]);
        let a = icpe(&e2, &u2).unwrap();
        let b = icpe_prime(&e2, &u2).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn icpe_zero_exposed_conversions_errors() {
        let exposed = corpus("e", 3, 30.0, &[0]);
        let unexposed = corpus("u", 3, 30.0, &[1]);
        assert!(matches!(
            icpe(&exposed, &unexposed),
            Err(Error::ZeroExposedConversions)
        ));
    }

    fn flat_model(rate_ln: f64) -> IntensityModel {
        IntensityModel::new(
            ModelSpec::default(),
            [(CoefKey::Intercept, rate_ln)].into_iter().collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_effect_model_gives_zero_picpu() {
        // No events, equal group sizes: the predicted sums are identical
        // floating-point computations, so PICPU is exactly zero.
        let exposed = corpus("e", 5, 30.0, &[1]);
        let unexposed = corpus("u", 5, 30.0, &[0]);
        let m = flat_model((1.0f64 / 30.0).ln());
        let got = predicted_metrics(&m, &exposed, &unexposed).unwrap();
        assert_eq!(got.picpu, 0.0);
    }

    #[test]
    fn zero_effect_model_gives_zero_aicpe() {
        let m = flat_model((1.0f64 / 30.0).ln());
        let exposed = corpus("e", 4, 30.0, &[2, 1]);
        let got = aicpe(&m, &exposed, CreditRule::BackwardsElimination, false).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn aicpe_requires_conversions() {
        let m = flat_model(-3.0);
        let exposed = corpus("e", 4, 30.0, &[0]);
        assert!(matches!(
            aicpe(&m, &exposed, CreditRule::BackwardsElimination, false),
            Err(Error::ZeroExposedConversions)
        ));
    }

    #[test]
    fn bootstrap_constant_metric_zero_width() {
        let exposed = corpus("e", 20, 30.0, &[1]);
        let unexposed = corpus("u", 20, 30.0, &[1]);
        let (lo, hi) =
            bootstrap_ci(|_, _| Ok(0.7), &exposed, &unexposed, 100, 9).unwrap();
        assert_eq!((lo, hi), (0.7, 0.7));
    }

    #[test]
    fn bootstrap_matches_clt_on_coin_metric() {
        // Metric: mean of a +/-1 "coin" derived from user ids over 10,000
        // users; the CLT half-width is 1.96 / sqrt(n).
        let users = 10_000;
        let exposed: Vec<UserPath> = (0..users)
            .map(|i| path_with(&format!("e{i}"), 30.0, i % 2))
            .collect();
        let unexposed = corpus("u", 10, 30.0, &[0]);
        let coin = |e: &[&UserPath], _u: &[&UserPath]| -> Result<f64> {
            Ok(e.iter()
                .map(|p| if p.conversion_times().is_empty() { -1.0 } else { 1.0 })
                .sum::<f64>()
                / e.len() as f64)
        };
        let (lo, hi) = bootstrap_ci(coin, &exposed, &unexposed, 400, 11).unwrap();
        let half = (hi - lo) / 2.0;
        let expect = 1.96 / (users as f64).sqrt();
        assert!(
            (half - expect).abs() < 0.2 * expect,
            "half-width {half} vs CLT {expect}"
        );
    }

    #[test]
    fn bootstrap_is_seed_reproducible() {
        let exposed = corpus("e", 50, 30.0, &[2, 1, 0]);
        let unexposed = corpus("u", 50, 30.0, &[1, 0]);
        let metric = |e: &[&UserPath], u: &[&UserPath]| icpu_refs(e, u);
        let a = bootstrap_ci(metric, &exposed, &unexposed, 200, 5).unwrap();
        let b = bootstrap_ci(metric, &exposed, &unexposed, 200, 5).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_ci(metric, &exposed, &unexposed, 200, 6).unwrap();
        assert_ne!(a, c);
    }

    fn featured(id: &str, level: &str, conversions: usize) -> UserPath {
        let window = ObservationWindow::new(0.0, 30.0).unwrap();
        let events = (0..conversions).map(|i| Event::conversion(1.0 + i as f64)).collect();
        UserPath::new(id, window, [("city", level)].into_iter().collect(), events).unwrap()
    }

    #[test]
    fn sliced_metrics_order_constructed_groups() {
        // City "a" has incremental lift 1, city "b" has none.
        let mut exposed = Vec::new();
        let mut unexposed = Vec::new();
        for i in 0..20 {
            exposed.push(featured(&format!("ea{i}"), "a", 2));
            unexposed.push(featured(&format!("ua{i}"), "a", 1));
            exposed.push(featured(&format!("eb{i}"), "b", 1));
            unexposed.push(featured(&format!("ub{i}"), "b", 1));
        }
        let reports = sliced_metrics(
            MetricKind::Icpu,
            |e, u| icpu_refs(e, u),
            &exposed,
            &unexposed,
            "city",
            None,
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        let by_level: BTreeMap<&str, f64> = reports
            .iter()
            .map(|r| (r.slice.as_ref().unwrap().level.as_str(), r.point))
            .collect();
        assert_abs_diff_eq!(by_level["a"], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(by_level["b"], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn slicing_on_path_derived_quantities_is_refused() {
        let exposed = vec![featured("e0", "a", 1)];
        let unexposed = vec![featured("u0", "a", 1)];
        let err = sliced_metrics(
            MetricKind::Icpu,
            |e, u| icpu_refs(e, u),
            &exposed,
            &unexposed,
            "number of queries",
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotAUserFeature(_)));
        assert!(err.to_string().contains("confounding"));
    }

    #[test]
    fn report_csv_layout() {
        let mut metrics = vec![MetricReport::point_only(MetricKind::Icpu, 0.25)];
        metrics.push(MetricReport {
            metric: MetricKind::Icpe,
            point: 0.119,
            ci_low: Some(0.11),
            ci_high: Some(0.13),
            bootstrap_replicates: 200,
            slice: Some(Slice { feature: "city".into(), level: "a".into() }),
        });
        let report = Report::new(metrics);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "metric,point,ci_low,ci_high,slice");
        assert_eq!(lines.next().unwrap(), "icpu,0.25,,,");
        assert_eq!(lines.next().unwrap(), "icpe,0.119,0.11,0.13,city=a");

        let mut json = Vec::new();
        report.write_json(&mut json).unwrap();
        let back: Report = serde_json::from_slice(&json).unwrap();
        assert_eq!(back.metrics.len(), 2);
    }

    #[test]
    fn block_jackknife_smoke() {
        // Tiny corpus, constant model: the metric barely varies across
        // blocks and the interval brackets the point.
        let exposed = corpus("e", 30, 30.0, &[1, 2, 0]);
        let unexposed = corpus("u", 30, 30.0, &[1, 0]);
        let report = block_jackknife_ci(
            &ModelSpec::default(),
            &crate::estimation::FitConfig::default(),
            &exposed,
            &unexposed,
            3,
            |model, e, u| {
                let rate = model.coefficient(&CoefKey::Intercept).unwrap().exp();
                let _ = (e, u);
                Ok(rate)
            },
        )
        .unwrap();
        assert!(report.ci_low <= report.point && report.point <= report.ci_high);
    }
}
