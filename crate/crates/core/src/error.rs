//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row} of {path}: {detail}")]
    Parse {
        path: String,
        row: usize,
        detail: String,
    },

    #[error("duplicate observation for country {country}, year {year}")]
    DuplicateObservation { country: String, year: i32 },

    #[error("country {country}: non-contiguous sample after trimming (missing {year} inside window)")]
    NonContiguousSample { country: String, year: i32 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty subsample: filter `{0}` matches no observations")]
    EmptySubsample(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("nonstationary volatility persistence: spectral radius {radius:.6} >= 1")]
    NonstationaryVolatility { radius: f64 },

    #[error("simulated path diverged in block `{block}` (country {country}, step {step})")]
    Divergence {
        block: String,
        country: usize,
        step: usize,
    },

    #[error("singular posterior in block `{block}`: {detail}")]
    SingularPosterior { block: String, detail: String },

    #[error("particle weights underflowed at time index {time} (country {country})")]
    WeightUnderflow { country: usize, time: usize },

    #[error("insufficient lags at time index {time}: usable window starts at {usable_start}")]
    InsufficientLags { time: usize, usable_start: usize },

    #[error("chain aborted at iteration {iteration}: {source}")]
    ChainAborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invariant violated at iteration {iteration}: {detail}")]
    InvariantViolation { iteration: usize, detail: String },

    #[error("constant chain: autocorrelation undefined")]
    ConstantChain,

    #[error("infeasible shock size {size}: baseline volatility is {baseline}")]
    InfeasibleShock { size: f64, baseline: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration or inputs rather than a
    /// failure at run time. The CLI maps these to exit code 2.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::DuplicateObservation { .. }
                | Error::NonContiguousSample { .. }
                | Error::Validation(_)
                | Error::EmptySubsample(_)
                | Error::Config(_)
                | Error::NonstationaryVolatility { .. }
                | Error::InfeasibleShock { .. }
        )
    }
}
