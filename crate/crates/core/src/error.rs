use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid input to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("incompatible parameter `{name}`: {detail}")]
    Incompatible { name: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("artifact {path} was produced under config hash {found}, expected {expected}")]
    ConfigMismatch {
        path: String,
        found: String,
        expected: String,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("step `{step}` is missing prerequisite {artifact}")]
    MissingArtifact { step: String, artifact: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Invalid {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

/// Parses one `key = value` config entry.
pub(crate) fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}
