use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("missing column `{0}` in archive header")]
    MissingColumn(String),

    #[error("unit mismatch: expected {expected}, found {found}")]
    UnitMismatch { expected: String, found: String },

    #[error("duplicate case key (station {station}, init {init_time}, lead {lead})")]
    DuplicateKey { station: String, init_time: i64, lead: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data for {context}: {found} cases, need {required}")]
    InsufficientData {
        context: String,
        found: usize,
        required: usize,
    },

    #[error("missing persistence observations for station {0}")]
    MissingPersistence(String),

    #[error("missing observation for station {0}")]
    MissingObservation(String),

    #[error("unknown predictor `{0}`")]
    UnknownPredictor(String),

    #[error("unknown station `{0}`")]
    UnknownStation(String),

    #[error("no model for key {0}")]
    NoModel(String),

    #[error("feature length mismatch: model expects {expected}, got {found}")]
    FeatureLength { expected: usize, found: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { expected: u32, found: u32 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error output and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Manifest(_) => "manifest",
            Error::MissingColumn(_) => "missing_column",
            Error::UnitMismatch { .. } => "unit_mismatch",
            Error::DuplicateKey { .. } => "duplicate_key",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::MissingPersistence(_) => "missing_persistence",
            Error::MissingObservation(_) => "missing_observation",
            Error::UnknownPredictor(_) => "unknown_predictor",
            Error::UnknownStation(_) => "unknown_station",
            Error::NoModel(_) => "no_model",
            Error::FeatureLength { .. } => "feature_length",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Undefined(_) => "undefined",
            Error::FormatVersion { .. } => "format_version",
        }
    }
}
