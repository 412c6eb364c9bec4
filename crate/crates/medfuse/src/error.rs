use std::io;
use std::path::PathBuf;

/// Malformed MMEB1 / MMWT1 bytes. Each variant is a distinct failure the
/// readers can report.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: not an {0} file")]
    BadMagic(&'static str),
    #[error("unsupported {format} version {found}")]
    UnsupportedVersion { format: &'static str, found: u32 },
    #[error("truncated body: {what} needs {needed} bytes at offset {offset}, {available} left")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after the last parameter")]
    TrailingBytes(usize),
    #[error("record {record} has an empty presence bitmask")]
    ZeroBitmask { record: usize },
    #[error("header declares {declared} records but the body holds {found}")]
    RecordCount { declared: usize, found: String },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("record {record}: {detail}")]
    BadRecord { record: usize, detail: String },
    #[error("config hash {found:016x} does not match {expected:016x}")]
    ConfigHash { expected: u64, found: u64 },
    #[error("checkpoint parameters do not match the model: {0}")]
    ParamMismatch(String),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] medfuse_core::error::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

pub type Result<T> = std::result::Result<T, Error>;
