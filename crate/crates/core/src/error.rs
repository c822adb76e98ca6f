//! Error taxonomy shared across the library.
//!
//! Variants map onto the failure classes the rest of the crate promises:
//! shape/dimension mismatches, numeric domain violations, non-finite values,
//! contract violations (a caller broke a stated precondition), configuration
//! problems, and data/IO problems. The CLI maps `Config` to exit code 2 and
//! `Data` to exit code 3.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible for an operation; names both shapes.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Axis out of range for a shape.
    Axis { axis: usize, shape: Vec<usize> },
    /// Mathematical domain violation (e.g. KL with a zero in the reference
    /// distribution where the left distribution has mass).
    Domain(String),
    /// A NaN or infinity appeared where a finite value is required.
    NonFinite(String),
    /// A stated API precondition was violated by the caller.
    Contract(String),
    /// Invalid configuration (task too large for the grid, bad ranges, ...).
    Config(String),
    /// Dataset / replay problems: parse failures, empty pools, bad schema.
    Data(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Axis { axis, shape } => {
                write!(f, "axis {axis} out of range for shape {shape:?}")
            }
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
