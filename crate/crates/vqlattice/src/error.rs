//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the toolkit.
///
/// Contract violations (bad dimensions, out-of-range arguments) are reported
/// as errors rather than panics so that callers driving the library from
/// config files get a diagnosable message instead of a crash.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an operation's arguments was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An input that must be nonempty was empty.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// No alignment exists for the requested frame/label configuration.
    #[error("impossible alignment: T={frames}, U={labels}")]
    ImpossibleAlignment { frames: usize, labels: usize },

    /// A brute-force routine refused an instance above its size guard.
    #[error("size guard exceeded: {0}")]
    SizeGuard(String),

    /// Beam search terminated without any complete hypothesis.
    #[error("no hypothesis reached the final set (beam too small?)")]
    NoHypothesis,

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A lattice failed an internal consistency check.
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    /// A symbol outside the closed vocabulary was encountered.
    #[error("unknown symbol: {0:?}")]
    UnknownSymbol(String),

    /// A file had an unexpected layout or version tag.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration is missing, malformed, or internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// The requested model variant and merge strategy cannot be combined.
    #[error("incompatible variant/strategy: {0}")]
    Incompatible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code the CLI maps this error to: 1 for usage problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Incompatible(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
