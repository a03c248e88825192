use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the core engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes that must agree did not.
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// An argument was outside the domain of the operation.
    InvalidArgument { op: &'static str, reason: String },
    /// `backward` was called on a non-scalar tensor.
    NotScalar(Vec<usize>),
    /// `backward` was called twice on the same graph.
    GraphConsumed,
    /// A list input was empty.
    EmptyInput(&'static str),
    /// Every pixel of a label map carried the ignore value.
    EmptySupervision,
    /// A configuration invariant was violated.
    InvalidConfig(String),
    /// A loss evaluated to NaN or infinity.
    NonFinite(&'static str),
    /// Training produced a non-finite loss; carries the offending step.
    NumericAbort {
        step: usize,
        report: crate::losses::LossReport,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                op,
                expected,
                found,
            } => write!(f, "{op}: shape mismatch, expected {expected:?}, found {found:?}"),
            Error::InvalidArgument { op, reason } => write!(f, "{op}: {reason}"),
            Error::NotScalar(shape) => write!(f, "backward needs a scalar loss, got shape {shape:?}"),
            Error::GraphConsumed => f.write_str("graph already consumed by a previous backward pass"),
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::EmptySupervision => f.write_str("empty supervision: every pixel is ignored"),
            Error::InvalidConfig(reason) => write!(f, "invalid configuration: {reason}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::NumericAbort { step, report } => write!(
                f,
                "non-finite loss at step {step}: ce={} cl={} or={} sp={} em={} total={}",
                report.ce, report.cl, report.or_, report.sp, report.em, report.total
            ),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_mismatch(op: &'static str, expected: &[usize], found: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
}

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}
