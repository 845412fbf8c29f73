//! Quantile least squares (Q–LS) instrumental-variables estimation.
//!
//! The first stage fits a grid of linear quantile regressions of the
//! endogenous regressor on a polynomial basis of the instruments; the fitted
//! quantiles form a dictionary that is aggregated into a single generated
//! instrument (equal, least-squares, ridge or LASSO weights). The second
//! stage is 2SLS or plug-in OLS with robust sandwich covariances. A
//! distribution-regression control-function estimator, first-stage
//! diagnostics and a Monte Carlo driver complete the toolkit.
pub mod control;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod instrument;
pub mod iv;
pub mod linalg;
pub mod quantile;
pub mod sim;

pub use data::Dataset;
pub use error::{QlsError, Result};
