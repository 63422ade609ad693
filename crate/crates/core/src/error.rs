use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification of an [`Error`], used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    MissingGroups,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unknown flag bits {0:#x}")]
    UnknownFlags(u32),

    #[error("truncated payload: need {expected} bytes, have {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),

    #[error("sample {index}: label {label} out of range for {n_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        n_classes: usize,
    },

    #[error("sample {index}: group {group} out of range for {n_groups} groups")]
    GroupOutOfRange {
        index: usize,
        group: u32,
        n_groups: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("class anchor {row} is not unit-norm (norm {norm})")]
    AnchorNotNormalized { row: usize, norm: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("positive pool for class {0} is empty")]
    EmptyPositivePool(usize),

    #[error("negative pool for class {0} is empty")]
    EmptyNegativePool(usize),

    #[error("reference head leaves every positive pool empty")]
    UnusableReferenceHead,

    #[error("dataset has no group labels")]
    MissingGroups,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what} at line {line}: {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::MissingGroups => ErrorKind::MissingGroups,
            Error::NonFinite(_) | Error::Numeric(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(what: &'static str, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            what,
            line,
            msg: msg.into(),
        }
    }
}
