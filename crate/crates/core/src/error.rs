use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("conditioning variant mismatch: network is {expected}, bundle is {found}")]
    VariantMismatch { expected: String, found: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("label {label} at (row {row}, col {col}) is out of range for {classes} classes")]
    LabelOutOfRange {
        label: u8,
        row: usize,
        col: usize,
        classes: usize,
    },

    #[error("manifest {path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint is incompatible with the requested configuration:\n{0}")]
    Incompatible(String),

    #[error(
        "non-finite loss at step {step}: l_simple={l_simple}, l_vlb={l_vlb}, total={total}"
    )]
    NonFiniteLoss {
        step: u64,
        l_simple: f64,
        l_vlb: f64,
        total: f64,
    },

    #[error("non-finite value in sampling trajectory at t={step}")]
    NonFiniteSample { step: usize },

    #[error("unmatched files between evaluation directories: {0:?}")]
    Unaligned(Vec<String>),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("external command failed: {0}")]
    External(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}
