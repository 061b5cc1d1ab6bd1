//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported schema version {found:?} (expected {expected:?})")]
    SchemaVersion { expected: String, found: String },

    #[error("duplicate user_id {0:?}")]
    DuplicateUser(String),

    #[error("user {user_id:?}: event at t={t} outside window [{start}, {end}]")]
    EventOutsideWindow {
        user_id: String,
        t: f64,
        start: f64,
        end: f64,
    },

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("segmentation requires piecewise-constant basis (term {term:?} uses {basis})")]
    NonStepBasis { term: String, basis: String },

    #[error("unsupported basis extension {0:?}")]
    UnsupportedBasis(String),

    #[error("coefficient key mismatch: {0}")]
    KeyMismatch(String),

    #[error("corpus contains no conversions")]
    NoConversions,

    #[error("degenerate normalization: total ad credit is zero")]
    DegenerateNormalization,

    #[error("conversion index {index} out of range ({available} conversions)")]
    ConversionIndexOutOfRange { index: usize, available: usize },

    #[error("ad index {index} out of range ({available} ads)")]
    AdIndexOutOfRange { index: usize, available: usize },

    #[error("{ads} ads exceed the exact-Shapley cap of {cap}; sampling estimators are not implemented")]
    ShapleyCapExceeded { ads: usize, cap: usize },

    #[error("empty {0} group")]
    EmptyGroup(String),

    #[error("exposed group has zero conversions")]
    ZeroExposedConversions,

    #[error("{0:?} is not a user feature; slicing on path-derived quantities is refused to avoid confounding between treatment, slice, and outcome")]
    NotAUserFeature(String),

    #[error("replicates do not share a model spec: {0}")]
    SpecMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
