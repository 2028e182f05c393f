//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Failure modes of the laboratory core.
///
/// `Shape` is for dimension/extent mismatches, `Domain` for invalid values
/// (non-finite data, empty supervision sets, fully masked softmax rows),
/// `Config` for inconsistent configuration or infeasible generation requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    Shape(String),
    Domain(String),
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
