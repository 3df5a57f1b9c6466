use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operands whose shapes or sizes violate an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Config text that failed to parse, with a 1-based line number.
    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },

    /// Binary container that failed to parse at `offset` bytes.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Training produced a non-finite loss term.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Any of the above, raised while handling `path`.
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: Box<Error> },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }

    /// Process exit code for this error: 2 config/usage, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::Numeric(_) | Error::NonFinite(_) => 4,
            Error::Parse { .. } => 3,
            Error::Contract(_) | Error::Config(_) | Error::ConfigLine { .. } => 2,
            Error::File { source, .. } => source.exit_code(),
        }
    }

    /// The error without any file context.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait AtPath<T> {
    fn at_path(self, path: &Path) -> Result<T>;
}

impl<T, E: Into<Error>> AtPath<T> for std::result::Result<T, E> {
    fn at_path(self, path: &Path) -> Result<T> {
        self.map_err(|e| match e.into() {
            e @ Error::File { .. } => e,
            e => Error::File { path: path.to_path_buf(), source: Box::new(e) },
        })
    }
}
