//! Path and event data model plus JSON Lines ingestion.
//!
//! A [`UserPath`] is one user's observation window together with the
//! time-ordered ad/query/conversion events that fell inside it. Paths are
//! immutable after construction and safe to share across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schema identifier for path files.
pub const PATHS_SCHEMA: &str = "mta-paths/1";

/// The half-open observation interval of a path, in abstract days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    start: f64,
    end: f64,
}

impl ObservationWindow {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() || start >= end {
            return Err(Error::InvalidPath(format!(
                "window [{start}, {end}] must satisfy start < end"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

/// Categorical feature assignments, name → level.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureValues(BTreeMap<String, String>);

impl FeatureValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn validate(&self) -> Result<()> {
        for (name, level) in &self.0 {
            if name.is_empty() || level.is_empty() {
                return Err(Error::InvalidPath(format!(
                    "feature entry {name:?} -> {level:?}: names and levels must be non-empty"
                )));
            }
        }
        Ok(())
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for FeatureValues {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// A request for an ad. `shown = true` means the ad was actually
    /// returned, so the event is simultaneously an ad event and a query
    /// event; `shown = false` is a pure query event (ad withheld).
    #[serde(rename = "ad")]
    AdQuery,
    Conversion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub t: f64,
    pub shown: bool,
    pub features: FeatureValues,
}

impl Event {
    pub fn ad(t: f64, features: FeatureValues) -> Self {
        Self { kind: EventKind::AdQuery, t, shown: true, features }
    }

    pub fn query(t: f64, features: FeatureValues) -> Self {
        Self { kind: EventKind::AdQuery, t, shown: false, features }
    }

    pub fn conversion(t: f64) -> Self {
        Self { kind: EventKind::Conversion, t, shown: true, features: FeatureValues::new() }
    }

    /// An ad event proper: an ad query that was actually shown.
    pub fn is_shown_ad(&self) -> bool {
        self.kind == EventKind::AdQuery && self.shown
    }

    pub fn is_query(&self) -> bool {
        self.kind == EventKind::AdQuery
    }
}

/// One user's observation window, features, and time-ordered events.
#[derive(Debug, Clone, PartialEq)]
pub struct UserPath {
    user_id: String,
    window: ObservationWindow,
    user_features: FeatureValues,
    events: Vec<Event>,
}

impl UserPath {
    /// Builds a path, sorting events and checking every invariant.
    ///
    /// Ties in time sort ad/query events before conversions (a conversion
    /// simultaneous with an ad is attributed with the ad's effect active);
    /// remaining ties keep input order. Conversion events are coerced to
    /// `shown = true`.
    pub fn new(
        user_id: impl Into<String>,
        window: ObservationWindow,
        user_features: FeatureValues,
        mut events: Vec<Event>,
    ) -> Result<Self> {
        let user_id = user_id.into();
        if user_id.is_empty() {
            return Err(Error::InvalidPath("user_id must be non-empty".into()));
        }
        user_features.validate()?;
        for ev in &mut events {
            if !ev.t.is_finite() || !window.contains(ev.t) {
                return Err(Error::EventOutsideWindow {
                    user_id,
                    t: ev.t,
                    start: window.start,
                    end: window.end,
                });
            }
            ev.features.validate()?;
            if ev.kind == EventKind::Conversion {
                ev.shown = true;
            }
        }
        sort_events(&mut events);
        Ok(Self { user_id, window, user_features, events })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn window(&self) -> ObservationWindow {
        self.window
    }

    pub fn user_features(&self) -> &FeatureValues {
        &self.user_features
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Consumes the path, returning its events.
    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// Ad events proper (shown ad queries), in time order.
    pub fn shown_ads(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.is_shown_ad())
    }

    /// All query events (every ad query, shown or withheld), in time order.
    pub fn queries(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.is_query())
    }

    pub fn conversions(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind == EventKind::Conversion)
    }

    pub fn conversion_times(&self) -> Vec<f64> {
        self.conversions().map(|e| e.t).collect()
    }

    /// Number of conversions with time in `(s, t]`.
    pub fn conversions_in(&self, s: f64, t: f64) -> Result<u64> {
        if s > t {
            return Err(Error::InvalidQuery(format!(
                "conversions_in requires s <= t, got s={s}, t={t}"
            )));
        }
        if s < self.window.start || t > self.window.end {
            return Err(Error::InvalidQuery(format!(
                "query ({s}, {t}] outside window [{}, {}]",
                self.window.start, self.window.end
            )));
        }
        Ok(self
            .conversions()
            .filter(|e| e.t > s && e.t <= t)
            .count() as u64)
    }
}

fn kind_rank(e: &Event) -> u8 {
    match e.kind {
        EventKind::AdQuery => 0,
        EventKind::Conversion => 1,
    }
}

fn sort_events(events: &mut [Event]) {
    // Stable, so input order breaks remaining ties.
    events.sort_by(|a, b| {
        a.t.total_cmp(&b.t).then_with(|| kind_rank(a).cmp(&kind_rank(b)))
    });
}

// ---------------------------------------------------------------------------
// JSON Lines wire format ("mta-paths/1")
// ---------------------------------------------------------------------------

fn default_shown() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    kind: EventKind,
    t: f64,
    #[serde(default = "default_shown", skip_serializing_if = "is_true")]
    shown: bool,
    #[serde(default, skip_serializing_if = "FeatureValues::is_empty")]
    features: FeatureValues,
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Serialize, Deserialize)]
struct PathRecord {
    user_id: String,
    window: (f64, f64),
    #[serde(default, skip_serializing_if = "FeatureValues::is_empty")]
    user_features: FeatureValues,
    events: Vec<EventRecord>,
}

impl From<&UserPath> for PathRecord {
    fn from(p: &UserPath) -> Self {
        PathRecord {
            user_id: p.user_id.clone(),
            window: (p.window.start, p.window.end),
            user_features: p.user_features.clone(),
            events: p
                .events
                .iter()
                .map(|e| EventRecord {
                    kind: e.kind,
                    t: e.t,
                    shown: e.shown,
                    features: e.features.clone(),
                })
                .collect(),
        }
    }
}

impl PathRecord {
    fn into_path(self) -> Result<UserPath> {
        let window = ObservationWindow::new(self.window.0, self.window.1)?;
        let events = self
            .events
            .into_iter()
            .map(|r| Event { kind: r.kind, t: r.t, shown: r.shown, features: r.features })
            .collect();
        UserPath::new(self.user_id, window, self.user_features, events)
    }
}

/// Loads a corpus from line-delimited JSON, one user per line.
///
/// `schema` must be [`PATHS_SCHEMA`]; the argument exists so callers state
/// which format version they expect. Errors report 1-based line numbers.
pub fn load_paths(source: impl BufRead, schema: &str) -> Result<Vec<UserPath>> {
    if schema != PATHS_SCHEMA {
        return Err(Error::SchemaVersion {
            expected: PATHS_SCHEMA.into(),
            found: schema.into(),
        });
    }
    let mut paths = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PathRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let path = record.into_path().map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(path.user_id.clone()) {
            return Err(Error::DuplicateUser(path.user_id));
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Writes a corpus as line-delimited JSON in input order.
pub fn write_paths(mut sink: impl Write, paths: &[UserPath]) -> Result<()> {
    for p in paths {
        serde_json::to_writer(&mut sink, &PathRecord::from(p))?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path_with(events: Vec<Event>) -> UserPath {
        UserPath::new(
            "u1",
            ObservationWindow::new(0.0, 30.0).unwrap(),
            FeatureValues::new(),
            events,
        )
        .unwrap()
    }

    #[test]
    fn load_single_record() {
        let line = r#"{"user_id":"u1","window":[0,30],"events":[{"kind":"ad","t":10.0,"shown":true,"features":{"type":"1"}}]}"#;
        let paths = load_paths(line.as_bytes(), PATHS_SCHEMA).unwrap();
        assert_eq!(paths.len(), 1);
        let p = &paths[0];
        assert_eq!(p.user_id(), "u1");
        assert_eq!(p.events().len(), 1);
        let e = &p.events()[0];
        assert_eq!(e.kind, EventKind::AdQuery);
        assert_eq!(e.t, 10.0);
        assert!(e.shown);
        assert_eq!(e.features.get("type"), Some("1"));
    }

    #[test]
    fn load_empty_stream() {
        let paths = load_paths("".as_bytes(), PATHS_SCHEMA).unwrap();
        assert!(paths.is_empty());
    }

    #[test]
    fn event_outside_window_rejected() {
        let line = r#"{"user_id":"u1","window":[0,30],"events":[{"kind":"ad","t":31.0}]}"#;
        let err = load_paths(line.as_bytes(), PATHS_SCHEMA).unwrap_err();
        assert!(err.to_string().contains("outside window"), "{err}");
    }

    #[test]
    fn unknown_kind_reports_line() {
        let line = r#"{"user_id":"u1","window":[0,30],"events":[{"kind":"banner","t":3.0}]}"#;
        let err = load_paths(line.as_bytes(), PATHS_SCHEMA).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn duplicate_user_rejected() {
        let lines = concat!(
            r#"{"user_id":"u1","window":[0,30],"events":[]}"#,
            "\n",
            r#"{"user_id":"u1","window":[0,30],"events":[]}"#
        );
        let err = load_paths(lines.as_bytes(), PATHS_SCHEMA).unwrap_err();
        assert!(matches!(err, Error::DuplicateUser(_)));
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let err = load_paths("".as_bytes(), "mta-paths/2").unwrap_err();
        assert!(matches!(err, Error::SchemaVersion { .. }));
    }

    #[test]
    fn conversions_in_counts_half_open() {
        let p = path_with(vec![Event::conversion(5.0), Event::conversion(12.0)]);
        assert_eq!(p.conversions_in(0.0, 10.0).unwrap(), 1);
        assert_eq!(p.conversions_in(0.0, 5.0).unwrap(), 1); // right endpoint included
        assert_eq!(p.conversions_in(5.0, 12.0).unwrap(), 1); // left endpoint excluded
        assert_eq!(p.conversions_in(7.0, 7.0).unwrap(), 0);
    }

    #[test]
    fn conversions_in_no_conversions() {
        let p = path_with(vec![Event::ad(3.0, FeatureValues::new())]);
        assert_eq!(p.conversions_in(0.0, 30.0).unwrap(), 0);
    }

    #[test]
    fn conversions_in_rejects_reversed_interval() {
        let p = path_with(vec![]);
        assert!(p.conversions_in(10.0, 5.0).is_err());
    }

    #[test]
    fn ad_sorts_before_simultaneous_conversion() {
        let p = path_with(vec![
            Event::conversion(10.0),
            Event::ad(10.0, FeatureValues::new()),
        ]);
        assert_eq!(p.events()[0].kind, EventKind::AdQuery);
        assert_eq!(p.events()[1].kind, EventKind::Conversion);
    }

    #[test]
    fn conversion_shown_coerced_true() {
        let line = r#"{"user_id":"u1","window":[0,30],"events":[{"kind":"conversion","t":3.0,"shown":false}]}"#;
        let paths = load_paths(line.as_bytes(), PATHS_SCHEMA).unwrap();
        assert!(paths[0].events()[0].shown);
    }

    #[test]
    fn empty_feature_name_rejected() {
        let line = r#"{"user_id":"u1","window":[0,30],"events":[{"kind":"ad","t":1.0,"features":{"":"x"}}]}"#;
        assert!(load_paths(line.as_bytes(), PATHS_SCHEMA).is_err());
    }

    // -- property tests ----------------------------------------------------

    fn arb_event() -> impl Strategy<Value = Event> {
        (0u8..3, 0.0..30.0f64, any::<bool>()).prop_map(|(k, t, shown)| match k {
            0 => Event::conversion(t),
            1 => Event { shown, ..Event::ad(t, [("type", "1")].into_iter().collect()) },
            _ => Event::query(t, FeatureValues::new()),
        })
    }

    fn arb_path() -> impl Strategy<Value = UserPath> {
        proptest::collection::vec(arb_event(), 0..12).prop_map(path_with)
    }

    proptest! {
        #[test]
        fn roundtrip_through_jsonl(p in arb_path()) {
            let mut buf = Vec::new();
            write_paths(&mut buf, std::slice::from_ref(&p)).unwrap();
            let back = load_paths(buf.as_slice(), PATHS_SCHEMA).unwrap();
            prop_assert_eq!(&back[0], &p);
        }

        #[test]
        fn conversion_counts_are_additive(p in arb_path(), a in 0.0..30.0f64, b in 0.0..30.0f64, c in 0.0..30.0f64) {
            let mut ts = [a, b, c];
            ts.sort_by(f64::total_cmp);
            let [a, b, c] = ts;
            let whole = p.conversions_in(a, c).unwrap();
            let split = p.conversions_in(a, b).unwrap() + p.conversions_in(b, c).unwrap();
            prop_assert_eq!(whole, split);
        }

        #[test]
        fn sorting_is_idempotent(p in arb_path()) {
            let again = UserPath::new(
                p.user_id(),
                p.window(),
                p.user_features().clone(),
                p.events().to_vec(),
            ).unwrap();
            prop_assert_eq!(again.events(), p.events());
        }
    }
}
