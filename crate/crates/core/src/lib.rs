//! Sequence-modeling toolkit built around two diagonal state space kernels:
//! the adaptive unitary SSM (AUSSM), whose transition eigenvalues are
//! input-dependent unit-magnitude rotations, and the selective S6 kernel used
//! by Mamba. Both are evaluated either by a sequential recurrence or by a
//! separable-convolution scan `y(t) = f(t) · Σ_{k≤t} g(k) u(k)` with chunked
//! carries, and both ship analytic backward passes that recompute the forward
//! chunk by chunk.
//!
//! On top of the kernels sit Mamba-style blocks and models ([`blocks`]), a
//! masked-objective training loop with AdamW and grid search ([`train`]),
//! deterministic generators for ten algorithmic tasks ([`tasks`]), exact
//! finite-automata oracles including mod-k counter synthesis ([`oracle`]),
//! and a runtime/memory scaling benchmark ([`bench`]).

pub mod bench;
pub mod blocks;
pub mod c64;
pub mod checkpoint;
pub mod kernels;
pub mod memtrack;
pub mod oracle;
pub mod scan;
pub mod tasks;
pub mod train;

use std::fmt;

/// Error taxonomy shared by every module.
#[derive(Debug)]
pub enum Error {
    /// An operation was called with arguments violating its contract
    /// (shape mismatch, stale cache, unknown symbol, ...).
    Contract(String),
    /// Invalid configuration (zero chunk length, empty grid, ...).
    Config(String),
    /// Non-finite values where finite ones are required.
    NonFinite(String),
    /// Malformed external input (out-of-range token, bad archive, ...).
    Input(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
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
