use thiserror::Error;

/// Errors produced by the estimators and the simulation designs.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum QlsError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank-deficient design: columns [{}] are linearly dependent on earlier columns", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error(
        "quantile solver did not converge after {iterations} iterations (duality gap {gap:.3e})"
    )]
    NotConverged {
        iterations: usize,
        gap: f64,
        last_iterate: Vec<f64>,
    },

    #[error("quantile fit failed at tau = {tau}: {source}")]
    AtQuantile {
        tau: f64,
        #[source]
        source: Box<QlsError>,
    },

    #[error("singular design: {0}")]
    Singular(String),

    #[error("degenerate instrument: {0}")]
    DegenerateInstrument(String),

    #[error("weak or degenerate instrument: S'P_M S is singular (smallest singular value {smallest_singular_value:.3e})")]
    WeakInstrument { smallest_singular_value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T, E = QlsError> = std::result::Result<T, E>;
