// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Errors raised by the modeling toolkit.
///
/// The variants map onto the CLI exit codes: input and schema problems are
/// user errors, numerical failures are reported separately so callers can
/// distinguish bad data from an ill-conditioned fit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("numerical error{}: {message}", time.map(|t| format!(" at time index {t}")).unwrap_or_default())]
    Numerical { message: String, time: Option<usize> },

    #[error("singular design: collinear columns [{}]", columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("log-likelihood decreased at EM iteration {iteration}: {previous} -> {current} (trace: {trace:?})")]
    LikelihoodDecrease {
        iteration: usize,
        previous: f64,
        current: f64,
        trace: Vec<f64>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(#[from] toml::de::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn numerical(msg: impl Into<String>, time: Option<usize>) -> Self {
        Error::Numerical {
            message: msg.into(),
            time,
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Schema(_) => "schema",
            Error::Numerical { .. } => "numerical",
            Error::SingularDesign { .. } => "singular_design",
            Error::LikelihoodDecrease { .. } => "likelihood_decrease",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Config(_) => "config",
        }
    }

    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. } | Error::LikelihoodDecrease { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
