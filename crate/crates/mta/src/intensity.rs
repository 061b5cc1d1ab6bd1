//! The log-linear conversion intensity: basis functions, feature effects,
//! ad-vs-query split, evaluation under full or truncated ad sets, and
//! segmentation of paths into constant-intensity intervals.
//!
//! A model's log-intensity at time `t` is the intercept (plus user-feature
//! shifts) plus, for every term, the summed basis contributions of the
//! term's qualifying events evaluated at age `x = t - t_event`. Basis
//! functions vanish for `x <= 0`: an event has no effect before it occurs,
//! and none at its own timestamp.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, FeatureValues, UserPath};

/// Schema identifier for serialized model documents.
pub const MODEL_SCHEMA: &str = "mta-model/1";

// ---------------------------------------------------------------------------
// Model structure
// ---------------------------------------------------------------------------

/// Time basis for an effect term, over the age `x = t - t_event`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSpec {
    /// Piecewise-constant effect over buckets `(0, b1], (b1, b2], ...`;
    /// the effect ends at the last boundary.
    Step { boundaries: Vec<f64> },
    /// One exponentially decaying element `exp(-rate * x)` per rate.
    /// Evaluable but not segmentable (the intensity is nowhere constant).
    Exponential { rates: Vec<f64> },
    /// Extension hook for future bases (e.g. splines). Carried through
    /// serialization but rejected at evaluation time.
    Extension { id: String },
}

impl BasisSpec {
    /// Number of basis elements (coefficients per qualifier).
    pub fn len(&self) -> usize {
        match self {
            BasisSpec::Step { boundaries } => boundaries.len(),
            BasisSpec::Exponential { rates } => rates.len(),
            BasisSpec::Extension { .. } => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_step(&self) -> bool {
        matches!(self, BasisSpec::Step { .. })
    }

    fn validate(&self) -> Result<()> {
        match self {
            BasisSpec::Step { boundaries } => {
                if boundaries.is_empty() {
                    return Err(Error::InvalidSpec("step basis needs at least one boundary".into()));
                }
                if boundaries[0] <= 0.0 {
                    return Err(Error::InvalidSpec("first step boundary must be positive".into()));
                }
                if boundaries.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidSpec(
                        "step boundaries must be strictly ascending".into(),
                    ));
                }
                if boundaries.iter().any(|b| !b.is_finite()) {
                    return Err(Error::InvalidSpec("step boundaries must be finite".into()));
                }
            }
            BasisSpec::Exponential { rates } => {
                if rates.is_empty() {
                    return Err(Error::InvalidSpec("exponential basis needs at least one rate".into()));
                }
                if rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
                    return Err(Error::InvalidSpec("exponential rates must be positive".into()));
                }
                let mut sorted = rates.clone();
                sorted.sort_by(f64::total_cmp);
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::InvalidSpec("exponential rates must be distinct".into()));
                }
            }
            BasisSpec::Extension { .. } => {}
        }
        Ok(())
    }

    fn describe(&self) -> &'static str {
        match self {
            BasisSpec::Step { .. } => "step",
            BasisSpec::Exponential { .. } => "exponential",
            BasisSpec::Extension { .. } => "extension",
        }
    }

    /// Index of the step bucket containing age `x`, if any.
    fn step_bucket(boundaries: &[f64], x: f64) -> Option<usize> {
        if x <= 0.0 || x > *boundaries.last().unwrap() {
            return None;
        }
        // Bucket l is (b_{l-1}, b_l]; first boundary >= x.
        Some(boundaries.partition_point(|&b| b < x))
    }
}

/// Which events a term attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    /// Shown ads only (the causal ad effect `f`, `g_k`).
    AdEffect,
    /// Every ad query, shown or withheld (the query effect `m`, `n_k`).
    QueryEffect,
}

/// Which events qualify for a term, and how they map to coefficient keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Every event of the term's kind.
    Always,
    /// Events whose feature equals the given level; the level is echoed in
    /// the coefficient key.
    FeatureEquals { feature: String, level: String },
    /// For each basis bucket, an indicator per exact number of qualifying
    /// events whose age falls in that bucket. Counts above `max_count`
    /// activate no key (implicit zero coefficient). Step basis only.
    ExactCount { filter: Box<Conditioning>, max_count: u32 },
    /// Events preceded by another event of the same term kind within the
    /// given number of days.
    PrecededWithin { days: f64 },
}

impl Conditioning {
    fn validate(&self) -> Result<()> {
        match self {
            Conditioning::Always => Ok(()),
            Conditioning::FeatureEquals { feature, level } => {
                if feature.is_empty() || level.is_empty() {
                    return Err(Error::InvalidSpec(
                        "feature_equals needs non-empty feature and level".into(),
                    ));
                }
                Ok(())
            }
            Conditioning::ExactCount { filter, max_count } => {
                if *max_count < 1 {
                    return Err(Error::InvalidSpec("exact_count max_count must be >= 1".into()));
                }
                match filter.as_ref() {
                    Conditioning::Always | Conditioning::FeatureEquals { .. } => filter.validate(),
                    _ => Err(Error::InvalidSpec(
                        "exact_count filter must be a plain feature predicate".into(),
                    )),
                }
            }
            Conditioning::PrecededWithin { days } => {
                if !(*days > 0.0) {
                    return Err(Error::InvalidSpec("preceded_within days must be positive".into()));
                }
                Ok(())
            }
        }
    }

    fn conditioned_feature(&self) -> Option<&str> {
        match self {
            Conditioning::FeatureEquals { feature, .. } => Some(feature),
            Conditioning::ExactCount { filter, .. } => filter.conditioned_feature(),
            _ => None,
        }
    }
}

/// One effect term of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub name: String,
    pub applies_to: EffectKind,
    pub basis: BasisSpec,
    pub conditioning: Conditioning,
}

/// The intensity structure: intercept features, effect terms, and the
/// identifiability reference levels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// User features that shift the intercept. A path's level contributes a
    /// coefficient unless it is the feature's reference level (missing
    /// features are treated as the reference level).
    #[serde(default)]
    pub intercept_features: Vec<String>,
    #[serde(default)]
    pub terms: Vec<TermSpec>,
    /// Reference level per conditioned feature; the reference level carries
    /// no coefficient.
    #[serde(default)]
    pub reference_levels: BTreeMap<String, String>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for term in &self.terms {
            if term.name.is_empty() {
                return Err(Error::InvalidSpec("term names must be non-empty".into()));
            }
            if !names.insert(term.name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate term name {:?}", term.name)));
            }
            term.basis.validate()?;
            term.conditioning.validate()?;
            if matches!(term.conditioning, Conditioning::ExactCount { .. }) && !term.basis.is_step()
            {
                return Err(Error::InvalidSpec(format!(
                    "term {:?}: exact_count conditioning requires a step basis",
                    term.name
                )));
            }
            if let Some(feature) = term.conditioning.conditioned_feature() {
                if !self.reference_levels.contains_key(feature) {
                    return Err(Error::InvalidSpec(format!(
                        "term {:?} conditions on feature {feature:?} with no reference level",
                        term.name
                    )));
                }
            }
        }
        for feature in &self.intercept_features {
            if !self.reference_levels.contains_key(feature) {
                return Err(Error::InvalidSpec(format!(
                    "intercept feature {feature:?} has no reference level"
                )));
            }
        }
        Ok(())
    }

    /// All bases piecewise constant, so exact segmentation is possible.
    pub fn is_piecewise_constant(&self) -> bool {
        self.terms.iter().all(|t| t.basis.is_step())
    }

    fn term(&self, name: &str) -> Option<&TermSpec> {
        self.terms.iter().find(|t| t.name == name)
    }
}

// ---------------------------------------------------------------------------
// Coefficient keys
// ---------------------------------------------------------------------------

/// Distinguishes coefficients within one term.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qualifier {
    None,
    Level(Arc<str>),
    Count(u32),
}

/// Identifies one fitted coefficient: the intercept, a user-feature shift,
/// or a (term, basis element, level-or-count) effect.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefKey {
    Intercept,
    UserFeature { feature: Arc<str>, level: Arc<str> },
    Term { term: Arc<str>, basis_index: u32, qualifier: Qualifier },
}

impl CoefKey {
    pub fn term(name: &str, basis_index: u32) -> Self {
        CoefKey::Term { term: name.into(), basis_index, qualifier: Qualifier::None }
    }

    pub fn term_level(name: &str, basis_index: u32, level: &str) -> Self {
        CoefKey::Term { term: name.into(), basis_index, qualifier: Qualifier::Level(level.into()) }
    }

    pub fn term_count(name: &str, basis_index: u32, count: u32) -> Self {
        CoefKey::Term { term: name.into(), basis_index, qualifier: Qualifier::Count(count) }
    }

    pub fn user_feature(feature: &str, level: &str) -> Self {
        CoefKey::UserFeature { feature: feature.into(), level: level.into() }
    }
}

impl fmt::Display for CoefKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoefKey::Intercept => write!(f, "intercept"),
            CoefKey::UserFeature { feature, level } => write!(f, "user:{feature}={level}"),
            CoefKey::Term { term, basis_index, qualifier } => match qualifier {
                Qualifier::None => write!(f, "{term}[{basis_index}]"),
                Qualifier::Level(l) => write!(f, "{term}[{basis_index}]={l}"),
                Qualifier::Count(c) => write!(f, "{term}[{basis_index}]#{c}"),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Fitted model
// ---------------------------------------------------------------------------

/// Which ads to include when evaluating the intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdSelection {
    /// All shown ads at or before the evaluation time.
    All,
    /// The first `n` shown ads (in time order) at or before the evaluation
    /// time; `Prefix(0)` drops all ad effects.
    Prefix(usize),
}

/// A [`ModelSpec`] together with fitted log-scale coefficients.
#[derive(Clone)]
pub struct IntensityModel {
    spec: ModelSpec,
    coefficients: BTreeMap<CoefKey, f64>,
    // Compiled once at construction; evaluation loops reuse it.
    runtime: std::sync::Arc<SpecRuntime>,
}

impl std::fmt::Debug for IntensityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntensityModel")
            .field("spec", &self.spec)
            .field("coefficients", &self.coefficients)
            .finish()
    }
}

impl PartialEq for IntensityModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.coefficients == other.coefficients
    }
}

impl IntensityModel {
    /// Builds and validates a model. The intercept coefficient must be
    /// present and every key must be derivable from the spec.
    pub fn new(spec: ModelSpec, coefficients: BTreeMap<CoefKey, f64>) -> Result<Self> {
        spec.validate()?;
        if !coefficients.contains_key(&CoefKey::Intercept) {
            return Err(Error::InvalidModel("intercept coefficient missing".into()));
        }
        for (key, value) in &coefficients {
            if !value.is_finite() || !value.exp().is_finite() {
                return Err(Error::InvalidModel(format!("coefficient {key} = {value} not finite")));
            }
            Self::check_key(&spec, key)?;
        }
        let runtime = std::sync::Arc::new(SpecRuntime::new(&spec)?);
        Ok(Self { spec, coefficients, runtime })
    }

    fn check_key(spec: &ModelSpec, key: &CoefKey) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidModel(msg));
        match key {
            CoefKey::Intercept => Ok(()),
            CoefKey::UserFeature { feature, level } => {
                if !spec.intercept_features.iter().any(|f| f.as_str() == &**feature) {
                    return fail(format!("{key}: {feature:?} is not an intercept feature"));
                }
                if spec.reference_levels.get(&**feature).map(String::as_str) == Some(&**level) {
                    return fail(format!("{key}: reference level carries no coefficient"));
                }
                Ok(())
            }
            CoefKey::Term { term, basis_index, qualifier } => {
                let Some(t) = spec.term(term) else {
                    return fail(format!("{key}: unknown term"));
                };
                if *basis_index as usize >= t.basis.len() {
                    return fail(format!("{key}: basis index out of range"));
                }
                let ok = match (&t.conditioning, qualifier) {
                    (Conditioning::Always, Qualifier::None) => true,
                    (Conditioning::PrecededWithin { .. }, Qualifier::None) => true,
                    (Conditioning::FeatureEquals { level, .. }, Qualifier::Level(l)) => {
                        level.as_str() == &**l
                    }
                    (Conditioning::ExactCount { max_count, .. }, Qualifier::Count(c)) => {
                        (1..=*max_count).contains(c)
                    }
                    _ => false,
                };
                if !ok {
                    return fail(format!("{key}: qualifier does not match term conditioning"));
                }
                Ok(())
            }
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn coefficients(&self) -> &BTreeMap<CoefKey, f64> {
        &self.coefficients
    }

    pub fn coefficient(&self, key: &CoefKey) -> Option<f64> {
        self.coefficients.get(key).copied()
    }

    /// Log-intensity for `path` at time `t` under the selected ads.
    ///
    /// Ad-effect terms sum over the selected shown ads only. Query-effect
    /// terms sum over all queries at or before `t` when `incremental` is
    /// set; otherwise over the withheld queries plus the selected ads'
    /// query aspects. Keys absent from the coefficient map contribute zero.
    pub fn log_intensity(
        &self,
        path: &UserPath,
        t: f64,
        ads: AdSelection,
        incremental: bool,
    ) -> Result<f64> {
        if !path.window().contains(t) {
            return Err(Error::InvalidQuery(format!(
                "t={t} outside window [{}, {}]",
                path.window().start(),
                path.window().end()
            )));
        }
        let shown: Vec<&Event> = path.shown_ads().filter(|e| e.t <= t).collect();
        let n = match ads {
            AdSelection::All => shown.len(),
            AdSelection::Prefix(k) => {
                if k > shown.len() {
                    return Err(Error::AdIndexOutOfRange { index: k, available: shown.len() });
                }
                k
            }
        };
        let subset: Vec<usize> = (0..n).collect();
        self.log_intensity_for_ads(path, t, &shown, &subset, incremental)
    }

    /// Log-intensity with an arbitrary subset of the shown ads present,
    /// identified by indices into `shown` (time-ordered shown ads at or
    /// before `t`). Conditioning features are recomputed on the subset as
    /// if those were the only ads.
    pub fn log_intensity_subset(
        &self,
        path: &UserPath,
        t: f64,
        subset: &[usize],
        incremental: bool,
    ) -> Result<f64> {
        if !path.window().contains(t) {
            return Err(Error::InvalidQuery(format!(
                "t={t} outside window [{}, {}]",
                path.window().start(),
                path.window().end()
            )));
        }
        let shown: Vec<&Event> = path.shown_ads().filter(|e| e.t <= t).collect();
        if let Some(&bad) = subset.iter().find(|&&i| i >= shown.len()) {
            return Err(Error::AdIndexOutOfRange { index: bad, available: shown.len() });
        }
        self.log_intensity_for_ads(path, t, &shown, subset, incremental)
    }

    fn log_intensity_for_ads(
        &self,
        path: &UserPath,
        t: f64,
        shown: &[&Event],
        subset: &[usize],
        incremental: bool,
    ) -> Result<f64> {
        let rt = &self.runtime;
        let ad_events: Vec<&Event> = subset.iter().map(|&i| shown[i]).collect();
        let query_events: Vec<&Event> = if incremental {
            path.queries().filter(|e| e.t <= t).collect()
        } else {
            // Withheld queries stay; removed ads take their query aspect
            // with them.
            let mut q: Vec<&Event> =
                path.queries().filter(|e| e.t <= t && !e.is_shown_ad()).collect();
            q.extend(ad_events.iter().copied());
            q.sort_by(|a, b| a.t.total_cmp(&b.t));
            q
        };
        let mut eta = 0.0;
        let mut add = |key: CoefKey, weight: f64| {
            if let Some(c) = self.coefficients.get(&key) {
                eta += c * weight;
            }
        };
        rt.accumulate(path.user_features(), &ad_events, &query_events, t, &mut add)?;
        Ok(eta)
    }

    /// Linear predictor of a segment under this model: the weighted sum of
    /// its active coefficients. Errors on keys the model does not carry.
    pub fn segment_eta(&self, segment: &Segment) -> Result<f64> {
        self.eta_for_active(segment.active())
    }

    /// [`Self::segment_eta`] over a raw active-key slice (as yielded by
    /// [`Segmenter::scan`]).
    pub fn eta_for_active(&self, active: &[(CoefKey, f64)]) -> Result<f64> {
        let mut eta = 0.0;
        for (key, weight) in active {
            match self.coefficients.get(key) {
                Some(c) => eta += c * weight,
                None => {
                    return Err(Error::KeyMismatch(format!(
                        "segment key {key} not in model coefficients"
                    )))
                }
            }
        }
        Ok(eta)
    }

    // -- serialization ------------------------------------------------------

    pub fn to_json_writer(&self, sink: impl Write) -> Result<()> {
        let file = ModelFile {
            schema: MODEL_SCHEMA.to_string(),
            spec: self.spec.clone(),
            coefficients: self
                .coefficients
                .iter()
                .map(|(key, value)| CoefEntry { key: key.clone(), value: *value })
                .collect(),
        };
        serde_json::to_writer_pretty(sink, &file)?;
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.to_json_writer(&mut buf)?;
        Ok(String::from_utf8(buf).expect("json is utf-8"))
    }

    pub fn from_json_reader(source: impl Read) -> Result<Self> {
        let file: ModelFile = serde_json::from_reader(source)?;
        if file.schema != MODEL_SCHEMA {
            return Err(Error::SchemaVersion {
                expected: MODEL_SCHEMA.into(),
                found: file.schema,
            });
        }
        let mut coefficients = BTreeMap::new();
        for entry in file.coefficients {
            if coefficients.insert(entry.key.clone(), entry.value).is_some() {
                return Err(Error::InvalidModel(format!("duplicate coefficient {}", entry.key)));
            }
        }
        Self::new(file.spec, coefficients)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema: String,
    spec: ModelSpec,
    coefficients: Vec<CoefEntry>,
}

#[derive(Serialize, Deserialize)]
struct CoefEntry {
    key: CoefKey,
    value: f64,
}

// ---------------------------------------------------------------------------
// Term evaluation machinery
// ---------------------------------------------------------------------------

enum FilterRt {
    Always,
    FeatureEquals { feature: String, level: String },
}

impl FilterRt {
    fn matches(&self, e: &Event) -> bool {
        match self {
            FilterRt::Always => true,
            FilterRt::FeatureEquals { feature, level } => {
                e.features.get(feature) == Some(level.as_str())
            }
        }
    }
}

enum CondRt {
    Always,
    FeatureEquals { feature: String, level: String, level_arc: Arc<str> },
    ExactCount { filter: FilterRt, max_count: u32 },
    PrecededWithin { days: f64 },
}

struct TermRt {
    name: Arc<str>,
    applies_to: EffectKind,
    basis: BasisSpec,
    cond: CondRt,
}

/// Pre-resolved spec view with interned key parts; build once, evaluate many.
pub(crate) struct SpecRuntime {
    terms: Vec<TermRt>,
    intercepts: Vec<(String, Arc<str>, String)>, // (feature, interned feature, reference level)
}

impl SpecRuntime {
    pub(crate) fn new(spec: &ModelSpec) -> Result<Self> {
        let mut terms = Vec::with_capacity(spec.terms.len());
        for t in &spec.terms {
            // Extension bases compile (models carrying them stay loadable)
            // and are rejected at evaluation time.
            let cond = match &t.conditioning {
                Conditioning::Always => CondRt::Always,
                Conditioning::FeatureEquals { feature, level } => CondRt::FeatureEquals {
                    feature: feature.clone(),
                    level: level.clone(),
                    level_arc: level.as_str().into(),
                },
                Conditioning::ExactCount { filter, max_count } => CondRt::ExactCount {
                    filter: match filter.as_ref() {
                        Conditioning::Always => FilterRt::Always,
                        Conditioning::FeatureEquals { feature, level } => FilterRt::FeatureEquals {
                            feature: feature.clone(),
                            level: level.clone(),
                        },
                        _ => unreachable!("validated filter"),
                    },
                    max_count: *max_count,
                },
                Conditioning::PrecededWithin { days } => CondRt::PrecededWithin { days: *days },
            };
            terms.push(TermRt {
                name: t.name.as_str().into(),
                applies_to: t.applies_to,
                basis: t.basis.clone(),
                cond,
            });
        }
        let intercepts = spec
            .intercept_features
            .iter()
            .map(|f| {
                let reference = spec.reference_levels.get(f).cloned().unwrap_or_default();
                (f.clone(), Arc::<str>::from(f.as_str()), reference)
            })
            .collect();
        Ok(Self { terms, intercepts })
    }

    /// Emits every (key, weight) pair active at probe time `t` given the
    /// event context. Weights are event counts for step bases, decay values
    /// for exponential bases, and indicators for exact-count terms. A key
    /// may be emitted more than once; callers sum.
    pub(crate) fn accumulate(
        &self,
        user_features: &FeatureValues,
        ad_events: &[&Event],
        query_events: &[&Event],
        t: f64,
        add: &mut impl FnMut(CoefKey, f64),
    ) -> Result<()> {
        add(CoefKey::Intercept, 1.0);
        for (feature, feature_arc, reference) in &self.intercepts {
            if let Some(level) = user_features.get(feature) {
                if level != reference {
                    add(
                        CoefKey::UserFeature {
                            feature: feature_arc.clone(),
                            level: level.into(),
                        },
                        1.0,
                    );
                }
            }
        }
        for term in &self.terms {
            let events: &[&Event] = match term.applies_to {
                EffectKind::AdEffect => ad_events,
                EffectKind::QueryEffect => query_events,
            };
            match &term.cond {
                CondRt::Always => {
                    self.emit_per_event(term, events, t, &Qualifier::None, |_| true, add)?
                }
                CondRt::FeatureEquals { feature, level, level_arc } => {
                    let qual = Qualifier::Level(level_arc.clone());
                    self.emit_per_event(
                        term,
                        events,
                        t,
                        &qual,
                        |e| e.features.get(feature) == Some(level.as_str()),
                        add,
                    )?
                }
                CondRt::PrecededWithin { days } => {
                    // An event qualifies if an earlier event of the same
                    // term kind occurred within `days` before it.
                    let qualifies = |e: &&Event| {
                        let idx = events.iter().position(|x| std::ptr::eq(*x, *e)).unwrap();
                        events[..idx].iter().any(|p| e.t - p.t < *days)
                    };
                    self.emit_per_event(term, events, t, &Qualifier::None, qualifies, add)?
                }
                CondRt::ExactCount { filter, max_count } => {
                    let BasisSpec::Step { boundaries } = &term.basis else {
                        unreachable!("validated: exact_count requires step basis");
                    };
                    let mut counts = vec![0u32; boundaries.len()];
                    for e in events {
                        if !filter.matches(e) {
                            continue;
                        }
                        if let Some(l) = BasisSpec::step_bucket(boundaries, t - e.t) {
                            counts[l] += 1;
                        }
                    }
                    for (l, &c) in counts.iter().enumerate() {
                        if c >= 1 && c <= *max_count {
                            add(
                                CoefKey::Term {
                                    term: term.name.clone(),
                                    basis_index: l as u32,
                                    qualifier: Qualifier::Count(c),
                                },
                                1.0,
                            );
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn emit_per_event(
        &self,
        term: &TermRt,
        events: &[&Event],
        t: f64,
        qualifier: &Qualifier,
        mut qualifies: impl FnMut(&&Event) -> bool,
        add: &mut impl FnMut(CoefKey, f64),
    ) -> Result<()> {
        for e in events {
            if !qualifies(e) {
                continue;
            }
            let x = t - e.t;
            match &term.basis {
                BasisSpec::Step { boundaries } => {
                    if let Some(l) = BasisSpec::step_bucket(boundaries, x) {
                        add(
                            CoefKey::Term {
                                term: term.name.clone(),
                                basis_index: l as u32,
                                qualifier: qualifier.clone(),
                            },
                            1.0,
                        );
                    }
                }
                BasisSpec::Exponential { rates } => {
                    if x > 0.0 {
                        for (l, rate) in rates.iter().enumerate() {
                            add(
                                CoefKey::Term {
                                    term: term.name.clone(),
                                    basis_index: l as u32,
                                    qualifier: qualifier.clone(),
                                },
                                (-rate * x).exp(),
                            );
                        }
                    }
                }
                BasisSpec::Extension { id } => return Err(Error::UnsupportedBasis(id.clone())),
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// A maximal sub-interval `(lo, hi]` of one path on which the intensity is
/// constant: the row unit of the Poisson regression (conversions = response,
/// exposure = offset).
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    user_id: Arc<str>,
    lo: f64,
    hi: f64,
    active: Vec<(CoefKey, f64)>,
    conversions: u32,
}

impl Segment {
    pub fn new(
        user_id: impl Into<Arc<str>>,
        lo: f64,
        hi: f64,
        mut active: Vec<(CoefKey, f64)>,
        conversions: u32,
    ) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::InvalidQuery(format!(
                "segment ({lo}, {hi}] must have positive exposure"
            )));
        }
        active.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self { user_id: user_id.into(), lo, hi, active, conversions })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    /// The half-open interval `(lo, hi]`.
    pub fn interval(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Active coefficient keys with their weights, sorted by key.
    pub fn active(&self) -> &[(CoefKey, f64)] {
        &self.active
    }

    pub fn conversions(&self) -> u32 {
        self.conversions
    }

    pub fn exposure(&self) -> f64 {
        self.hi - self.lo
    }
}

/// One constant-intensity interval yielded by [`Segmenter::scan`]; the
/// active slice borrows the scan's scratch buffer.
#[derive(Debug, Clone, Copy)]
pub struct SegmentView<'a> {
    pub lo: f64,
    pub hi: f64,
    pub conversions: u32,
    /// Active keys with weights, sorted by key.
    pub active: &'a [(CoefKey, f64)],
}

impl SegmentView<'_> {
    pub fn exposure(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Reusable buffers for [`Segmenter::scan`]; keeping them across paths
/// avoids per-segment allocation in bulk pipelines.
#[derive(Default)]
pub struct SegScratch {
    breakpoints: Vec<f64>,
    weights: Vec<(CoefKey, f64)>,
}

/// Reusable segmentation engine: compiles a piecewise-constant spec once
/// and segments many paths cheaply.
pub struct Segmenter {
    rt: std::sync::Arc<SpecRuntime>,
    /// Union of step boundaries over all terms, plus the implicit zero.
    cuts: Vec<f64>,
}

impl Segmenter {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        Self::build(spec, std::sync::Arc::new(SpecRuntime::new(spec)?))
    }

    /// Reuses a model's compiled spec.
    pub fn for_model(model: &IntensityModel) -> Result<Self> {
        Self::build(model.spec(), model.runtime.clone())
    }

    fn build(spec: &ModelSpec, rt: std::sync::Arc<SpecRuntime>) -> Result<Self> {
        let mut cuts = vec![0.0];
        for term in &spec.terms {
            match &term.basis {
                BasisSpec::Step { boundaries } => cuts.extend_from_slice(boundaries),
                other => {
                    return Err(Error::NonStepBasis {
                        term: term.name.clone(),
                        basis: other.describe().into(),
                    })
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        Ok(Self { rt, cuts })
    }

    /// Streams a path's constant-intensity segments without materializing
    /// them. Breakpoints are the window edges plus every ad/query time
    /// shifted by every step boundary (and zero); active keys are probed at
    /// each segment's midpoint, which is safe because no key can change
    /// inside a segment.
    pub fn scan(
        &self,
        path: &UserPath,
        scratch: &mut SegScratch,
        mut sink: impl FnMut(SegmentView<'_>),
    ) -> Result<()> {
        let window = path.window();
        let (start, end) = (window.start(), window.end());

        let query_events: Vec<&Event> = path.queries().collect();
        let breakpoints = &mut scratch.breakpoints;
        breakpoints.clear();
        breakpoints.push(start);
        breakpoints.push(end);
        for e in &query_events {
            for b in &self.cuts {
                let cut = e.t + b;
                if cut > start && cut < end {
                    breakpoints.push(cut);
                }
            }
        }
        breakpoints.sort_by(f64::total_cmp);
        breakpoints.dedup();

        let ad_events: Vec<&Event> = path.shown_ads().collect();
        let conversions: Vec<f64> = path.conversion_times();

        let mut conv_idx = 0;
        for pair in breakpoints.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            // Conversions in (lo, hi]; conversion times are sorted.
            while conv_idx < conversions.len() && conversions[conv_idx] <= lo {
                conv_idx += 1;
            }
            let first = conv_idx;
            while conv_idx < conversions.len() && conversions[conv_idx] <= hi {
                conv_idx += 1;
            }

            let mid = lo + (hi - lo) / 2.0;
            let weights = &mut scratch.weights;
            weights.clear();
            // Few keys per segment: linear merge beats a map.
            let mut add = |key: CoefKey, w: f64| {
                match weights.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, acc)) => *acc += w,
                    None => weights.push((key, w)),
                }
            };
            self.rt
                .accumulate(path.user_features(), &ad_events, &query_events, mid, &mut add)?;
            weights.sort_by(|a, b| a.0.cmp(&b.0));
            sink(SegmentView {
                lo,
                hi,
                conversions: (conv_idx - first) as u32,
                active: weights,
            });
        }
        Ok(())
    }

    /// Materialized segmentation of one path.
    pub fn segment(&self, path: &UserPath) -> Result<Vec<Segment>> {
        let user_id: Arc<str> = path.user_id().into();
        let mut segments = Vec::new();
        let mut scratch = SegScratch::default();
        self.scan(path, &mut scratch, |view| {
            segments.push(Segment {
                user_id: user_id.clone(),
                lo: view.lo,
                hi: view.hi,
                active: view.active.to_vec(),
                conversions: view.conversions,
            });
        })?;
        Ok(segments)
    }
}

/// One-shot [`Segmenter`] convenience for a single path.
pub fn segment_path(spec: &ModelSpec, path: &UserPath) -> Result<Vec<Segment>> {
    Segmenter::new(spec)?.segment(path)
}

/// Total exposure (days) per key over the segments where it is active.
pub fn total_offset_by_key(segments: &[Segment]) -> BTreeMap<CoefKey, f64> {
    let mut offsets = BTreeMap::new();
    for s in segments {
        for (key, _) in &s.active {
            *offsets.entry(key.clone()).or_insert(0.0) += s.exposure();
        }
    }
    offsets
}
