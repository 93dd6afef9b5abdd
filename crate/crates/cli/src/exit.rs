//! The exit-code contract shared by every command.

use std::fmt;

use srepa_core::Error;

pub const OK: u8 = 0;
pub const CHECK_FAILED: u8 = 1;
pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const NUMERICAL: u8 = 4;

/// An error that already knows which exit code it maps to.
#[derive(Debug)]
pub struct Coded {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for Coded {}

/// Attaches an explicit exit code to any failure.
pub trait WithCode<T> {
    fn code(self, code: u8) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8) -> anyhow::Result<T> {
        self.map_err(|e| {
            Coded {
                code,
                error: e.into(),
            }
            .into()
        })
    }
}

/// Exit code of a library error.
pub fn library_code(e: &Error) -> u8 {
    match e.root() {
        Error::Io { .. } | Error::Format { .. } => IO,
        Error::NonFinite(_) | Error::Numerical(_) => NUMERICAL,
        _ => USAGE,
    }
}

/// Exit code for an error returned by a command.
pub fn code_of(e: &anyhow::Error) -> u8 {
    if let Some(c) = e.downcast_ref::<Coded>() {
        return c.code;
    }
    for cause in e.chain() {
        if let Some(lib) = cause.downcast_ref::<Error>() {
            return library_code(lib);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return IO;
        }
    }
    USAGE
}
