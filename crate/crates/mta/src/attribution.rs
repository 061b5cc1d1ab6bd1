//! Per-conversion credit assignment.
//!
//! Both rules score a conversion at time `t*` by how ads changed the
//! estimated intensity there. Backwards elimination telescopes: removing
//! ads from last to first, each ad is credited with the drop in
//! `lambda(t*)` its removal causes, so synergy between ads accrues to the
//! later ad. Shapley values average an ad's marginal contribution over all
//! subsets of the other ads, splitting any k-way synergy evenly.
//!
//! In incremental mode (experiment-fitted models with separate ad and query
//! effects) query effects are kept in full throughout: removing an ad
//! removes only its ad effect, and the baseline is the intensity of the
//! counterfactual path whose queries all went unanswered.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::UserPath;
use crate::intensity::{AdSelection, IntensityModel};

/// Schema identifier for credit files.
pub const CREDIT_SCHEMA: &str = "mta-credit/1";

/// Largest path (ads before the conversion) for exact Shapley enumeration;
/// `2^15` subset evaluations.
pub const DEFAULT_SHAPLEY_MAX_ADS: usize = 15;

/// Total ad credit smaller than this times `lambda(t*)` counts as zero for
/// the non-baseline normalization.
const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreditRule {
    BackwardsElimination,
    Shapley,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Credits in intensity units; baseline plus ad credits total
    /// `lambda(t*)`.
    Raw,
    /// Divided by `lambda(t*)`; baseline plus ad credits total 1.
    Normalized,
    /// Ad credits divided by the total ad credit; they sum to 1 and the
    /// baseline is reported as zero. Errors when the total ad credit is
    /// zero.
    NonBaselineNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdCredit {
    /// Index among the shown ads at or before the conversion, in time order.
    pub ad_index: usize,
    /// The ad's timestamp.
    pub t: f64,
    pub credit: f64,
}

/// Credit for one conversion under a chosen rule and normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditAssignment {
    pub conversion_time: f64,
    pub rule: CreditRule,
    pub normalization: Normalization,
    pub incremental: bool,
    pub baseline_credit: f64,
    pub ad_credits: Vec<AdCredit>,
}

impl CreditAssignment {
    pub fn total_ad_credit(&self) -> f64 {
        self.ad_credits.iter().map(|c| c.credit).sum()
    }
}

/// Marginal and synergy decomposition of a backwards-elimination pass:
/// `RawCredit(j) = marginal(j) + step_synergy(j)` for every ad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyReport {
    /// `m({A_j})`: each ad's raw credit had it been the only ad.
    pub marginals: Vec<f64>,
    /// `S(A(j-1), A_j)`: the synergy released when ad `j` joins the prefix.
    pub step_synergies: Vec<f64>,
}

fn conversion_time(path: &UserPath, index: usize) -> Result<f64> {
    let times = path.conversion_times();
    times.get(index).copied().ok_or(Error::ConversionIndexOutOfRange {
        index,
        available: times.len(),
    })
}

/// Intensities `lambda(t*, A(0)), ..., lambda(t*, A(n))` over ad prefixes.
fn prefix_lambdas(
    model: &IntensityModel,
    path: &UserPath,
    t_star: f64,
    incremental: bool,
) -> Result<Vec<f64>> {
    let n = path.shown_ads().filter(|e| e.t <= t_star).count();
    (0..=n)
        .map(|j| {
            model
                .log_intensity(path, t_star, AdSelection::Prefix(j), incremental)
                .map(f64::exp)
        })
        .collect()
}

fn ads_before(path: &UserPath, t_star: f64) -> Vec<(usize, f64)> {
    path.shown_ads()
        .filter(|e| e.t <= t_star)
        .enumerate()
        .map(|(i, e)| (i, e.t))
        .collect()
}

fn normalize(
    rule: CreditRule,
    normalization: Normalization,
    incremental: bool,
    t_star: f64,
    baseline: f64,
    full: f64,
    raw: Vec<(usize, f64, f64)>, // (ad_index, t, raw credit)
) -> Result<CreditAssignment> {
    let total_ad: f64 = raw.iter().map(|(_, _, c)| c).sum();
    let (scale, baseline_credit) = match normalization {
        Normalization::Raw => (1.0, baseline),
        Normalization::Normalized => (1.0 / full, baseline / full),
        Normalization::NonBaselineNormalized => {
            if total_ad.abs() <= DEGENERATE_EPS * full.abs() {
                return Err(Error::DegenerateNormalization);
            }
            (1.0 / total_ad, 0.0)
        }
    };
    Ok(CreditAssignment {
        conversion_time: t_star,
        rule,
        normalization,
        incremental,
        baseline_credit,
        ad_credits: raw
            .into_iter()
            .map(|(ad_index, t, credit)| AdCredit { ad_index, t, credit: credit * scale })
            .collect(),
    })
}

/// Backwards-elimination credit for the path's `conversion_index`-th
/// conversion, with the marginal/synergy decomposition.
pub fn backwards_elimination(
    model: &IntensityModel,
    path: &UserPath,
    conversion_index: usize,
    normalization: Normalization,
    incremental: bool,
) -> Result<(CreditAssignment, SynergyReport)> {
    let t_star = conversion_time(path, conversion_index)?;
    let lambdas = prefix_lambdas(model, path, t_star, incremental)?;
    let ads = ads_before(path, t_star);
    let n = ads.len();
    let baseline = lambdas[0];

    let raw: Vec<(usize, f64, f64)> = ads
        .iter()
        .map(|&(i, t)| (i, t, lambdas[i + 1] - lambdas[i]))
        .collect();

    // m({A_j}) needs each ad evaluated alone.
    let mut marginals = Vec::with_capacity(n);
    let mut step_synergies = Vec::with_capacity(n);
    for &(i, _) in &ads {
        let alone = model.log_intensity_subset(path, t_star, &[i], incremental)?.exp();
        let m_j = alone - baseline;
        marginals.push(m_j);
        step_synergies.push(raw[i].2 - m_j);
    }

    let assignment = normalize(
        CreditRule::BackwardsElimination,
        normalization,
        incremental,
        t_star,
        baseline,
        lambdas[n],
        raw,
    )?;
    Ok((assignment, SynergyReport { marginals, step_synergies }))
}

/// Exact Shapley credit for the path's `conversion_index`-th conversion,
/// enumerating all `2^n` ad subsets. Paths with more than `max_ads` ads
/// before the conversion are rejected.
pub fn shapley_with_cap(
    model: &IntensityModel,
    path: &UserPath,
    conversion_index: usize,
    normalization: Normalization,
    incremental: bool,
    max_ads: usize,
) -> Result<CreditAssignment> {
    let t_star = conversion_time(path, conversion_index)?;
    let ads = ads_before(path, t_star);
    let n = ads.len();
    if n > max_ads {
        return Err(Error::ShapleyCapExceeded { ads: n, cap: max_ads });
    }

    // lambda(t*, O) for every subset mask.
    let mut lambda = vec![0.0f64; 1 << n];
    let mut subset = Vec::with_capacity(n);
    for mask in 0..(1usize << n) {
        subset.clear();
        subset.extend((0..n).filter(|i| mask & (1 << i) != 0).map(|i| ads[i].0));
        lambda[mask] = model.log_intensity_subset(path, t_star, &subset, incremental)?.exp();
    }
    let baseline = lambda[0];
    let full = lambda[(1 << n) - 1];

    // phi_j = sum over subsets O of the others of
    //         |O|! (n - |O| - 1)! / n! * [v(O + j) - v(O)];
    // the baseline cancels in the difference, so lambda works as v.
    let mut factorial = vec![1.0f64; n + 1];
    for i in 1..=n {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let weight: Vec<f64> =
        (0..n).map(|s| factorial[s] * factorial[n - s - 1] / factorial[n]).collect();

    let raw: Vec<(usize, f64, f64)> = ads
        .iter()
        .map(|&(j, t)| {
            let bit = 1usize << j;
            let mut phi = 0.0;
            for mask in 0..(1usize << n) {
                if mask & bit != 0 {
                    continue;
                }
                let s = (mask as u32).count_ones() as usize;
                phi += weight[s] * (lambda[mask | bit] - lambda[mask]);
            }
            (j, t, phi)
        })
        .collect();

    normalize(CreditRule::Shapley, normalization, incremental, t_star, baseline, full, raw)
}

/// [`shapley_with_cap`] at the default cap of [`DEFAULT_SHAPLEY_MAX_ADS`].
pub fn shapley(
    model: &IntensityModel,
    path: &UserPath,
    conversion_index: usize,
    normalization: Normalization,
    incremental: bool,
) -> Result<CreditAssignment> {
    shapley_with_cap(model, path, conversion_index, normalization, incremental, DEFAULT_SHAPLEY_MAX_ADS)
}

/// `S(A(j-1), A_j) = m(A(j)) - m(A(j-1)) - m({A_j})` at time `t_star`;
/// `j` is 1-based as in the defining formula.
pub fn synergy(model: &IntensityModel, path: &UserPath, t_star: f64, j: usize) -> Result<f64> {
    let ads = ads_before(path, t_star);
    if j < 1 || j > ads.len() {
        return Err(Error::AdIndexOutOfRange { index: j, available: ads.len() });
    }
    let lambdas = prefix_lambdas(model, path, t_star, false)?;
    let baseline = lambdas[0];
    let alone = model.log_intensity_subset(path, t_star, &[ads[j - 1].0], false)?.exp();
    Ok((lambdas[j] - baseline) - (lambdas[j - 1] - baseline) - (alone - baseline))
}

/// Verification record for the equal-synergy-share property of Shapley
/// values on a path whose only interaction is a single k-way synergy term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyShareCheck {
    pub ads: usize,
    /// Top-order interaction of the coalition value (Moebius inversion).
    pub kway_synergy: f64,
    /// `kway_synergy / ads`.
    pub expected_share: f64,
    /// Each ad's Shapley credit minus its lone-ad marginal.
    pub per_ad_extra: Vec<f64>,
    pub max_deviation: f64,
    /// All extras within 1e-9 of the expected share.
    pub passed: bool,
}

/// Computes each ad's Shapley credit in excess of its lone-ad marginal and
/// checks the excess equals `1/k` of the k-way synergy. Meaningful on
/// constructed models whose synergy is a single k-way interaction.
pub fn shapley_synergy_share_check(
    model: &IntensityModel,
    path: &UserPath,
    conversion_index: usize,
    incremental: bool,
) -> Result<SynergyShareCheck> {
    let t_star = conversion_time(path, conversion_index)?;
    let ads = ads_before(path, t_star);
    let n = ads.len();
    let credit =
        shapley_with_cap(model, path, conversion_index, Normalization::Raw, incremental, DEFAULT_SHAPLEY_MAX_ADS)?;

    let baseline = model.log_intensity(path, t_star, AdSelection::Prefix(0), incremental)?.exp();
    let mut per_ad_extra = Vec::with_capacity(n);
    for (slot, &(i, _)) in ads.iter().enumerate() {
        let alone = model.log_intensity_subset(path, t_star, &[i], incremental)?.exp();
        per_ad_extra.push(credit.ad_credits[slot].credit - (alone - baseline));
    }

    // Top-order Moebius interaction: sum over subsets of (-1)^(n-|O|) v(O).
    // Only coalitions of two or more ads can carry synergy.
    let mut kway = 0.0;
    if n >= 2 {
        let mut subset = Vec::with_capacity(n);
        for mask in 0..(1usize << n) {
            subset.clear();
            subset.extend((0..n).filter(|i| mask & (1 << i) != 0).map(|i| ads[i].0));
            let v =
                model.log_intensity_subset(path, t_star, &subset, incremental)?.exp() - baseline;
            let sign = if (n - (mask as u32).count_ones() as usize) % 2 == 0 { 1.0 } else { -1.0 };
            kway += sign * v;
        }
    }
    let expected_share = if n > 0 { kway / n as f64 } else { 0.0 };
    let max_deviation = per_ad_extra
        .iter()
        .map(|e| (e - expected_share).abs())
        .fold(0.0, f64::max);
    Ok(SynergyShareCheck {
        ads: n,
        kway_synergy: kway,
        expected_share,
        per_ad_extra,
        max_deviation,
        passed: max_deviation <= 1e-9,
    })
}

/// Expected normalized credit of the path's `ad_index`-th shown ad: the
/// exact integral of `lambda(t, A(j)) - lambda(t, A(j-1))` from the ad's
/// time to the window end. Requires a piecewise-constant model.
pub fn expected_credit(
    model: &IntensityModel,
    path: &UserPath,
    ad_index: usize,
    incremental: bool,
) -> Result<f64> {
    for term in &model.spec().terms {
        if !term.basis.is_step() {
            return Err(Error::NonStepBasis {
                term: term.name.clone(),
                basis: "non-step".into(),
            });
        }
    }
    let ads: Vec<f64> = path.shown_ads().map(|e| e.t).collect();
    if ad_index >= ads.len() {
        return Err(Error::AdIndexOutOfRange { index: ad_index, available: ads.len() });
    }
    let t_j = ads[ad_index];
    let end = path.window().end();
    if t_j >= end {
        return Ok(0.0);
    }

    // The integrand is piecewise constant between event-plus-boundary cuts.
    let mut cuts = vec![t_j, end];
    for e in path.events().iter().filter(|e| e.is_query()) {
        if e.t > t_j && e.t < end {
            cuts.push(e.t);
        }
        for term in &model.spec().terms {
            if let crate::intensity::BasisSpec::Step { boundaries } = &term.basis {
                for b in boundaries {
                    let cut = e.t + b;
                    if cut > t_j && cut < end {
                        cuts.push(cut);
                    }
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let j = ad_index + 1; // prefix size including the ad
    let mut integral = 0.0;
    for pair in cuts.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let mid = lo + (hi - lo) / 2.0;
        let with = model.log_intensity(path, mid, AdSelection::Prefix(j), incremental)?.exp();
        let without =
            model.log_intensity(path, mid, AdSelection::Prefix(j - 1), incremental)?.exp();
        integral += (with - without) * (hi - lo);
    }
    Ok(integral)
}

// ---------------------------------------------------------------------------
// Credit files ("mta-credit/1")
// ---------------------------------------------------------------------------

/// One attributed conversion, as serialized to credit files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditRecord {
    pub user_id: String,
    pub t_star: f64,
    pub rule: CreditRule,
    pub normalization: Normalization,
    pub incremental: bool,
    pub baseline: f64,
    pub credits: Vec<AdCredit>,
}

impl CreditRecord {
    pub fn from_assignment(user_id: &str, a: &CreditAssignment) -> Self {
        Self {
            user_id: user_id.to_string(),
            t_star: a.conversion_time,
            rule: a.rule,
            normalization: a.normalization,
            incremental: a.incremental,
            baseline: a.baseline_credit,
            credits: a.ad_credits.clone(),
        }
    }

    pub fn total_ad_credit(&self) -> f64 {
        self.credits.iter().map(|c| c.credit).sum()
    }
}

/// Attributes every conversion in the corpus, ordered by (user_id,
/// conversion time).
pub fn attribute_corpus(
    model: &IntensityModel,
    paths: &[UserPath],
    rule: CreditRule,
    normalization: Normalization,
    incremental: bool,
    shapley_max_ads: usize,
) -> Result<Vec<CreditRecord>> {
    use rayon::prelude::*;
    let mut per_path: Vec<Vec<CreditRecord>> = paths
        .par_iter()
        .map(|p| {
            let conversions = p.conversion_times().len();
            let mut records = Vec::with_capacity(conversions);
            for idx in 0..conversions {
                let assignment = match rule {
                    CreditRule::BackwardsElimination => {
                        backwards_elimination(model, p, idx, normalization, incremental)?.0
                    }
                    CreditRule::Shapley => shapley_with_cap(
                        model,
                        p,
                        idx,
                        normalization,
                        incremental,
                        shapley_max_ads,
                    )?,
                };
                records.push(CreditRecord::from_assignment(p.user_id(), &assignment));
            }
            Ok(records)
        })
        .collect::<Result<_>>()?;
    per_path.sort_by(|a, b| {
        let ka = a.first().map(|r| r.user_id.as_str()).unwrap_or("");
        let kb = b.first().map(|r| r.user_id.as_str()).unwrap_or("");
        ka.cmp(kb)
    });
    Ok(per_path.into_iter().flatten().collect())
}

pub fn write_credits(mut sink: impl Write, records: &[CreditRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_credits(source: impl BufRead) -> Result<Vec<CreditRecord>> {
    let mut records = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(records)
}
