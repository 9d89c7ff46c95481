use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("clip `{clip}`: schema violation: {msg}")]
    Schema { clip: String, msg: String },
    #[error("clip `{clip}`: dimension mismatch: {msg}")]
    Dimension { clip: String, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: invalid value `{value}`: {msg}")]
    InvalidValue {
        key: String,
        value: String,
        msg: String,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint manifest: field `{field}`: {msg}")]
    Manifest { field: String, msg: String },
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint tensor `{name}`: {msg}")]
    Tensor { name: String, msg: String },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token tag mismatch: {0}")]
    TagMismatch(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Top-level error for pipeline entry points.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown clip id `{0}`")]
    UnknownClip(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
