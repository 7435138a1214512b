//! Panel vector autoregression with stochastic volatility in mean.
//!
//! The model couples two equations estimated jointly on country-year panels:
//! a VAR for the observed variables in which latent log-variances enter the
//! conditional mean as regressors, and a panel VAR(1) for those log-variances.
//! Contemporaneous identification is recursive: variables ordered earlier
//! (climate) do not respond within the year to shocks of variables ordered
//! later (macro), for both level and volatility shocks.
//!
//! Estimation is a five-block Gibbs sampler. Four blocks are conjugate
//! (mean coefficients by GLS, impact matrix rows by weighted regressions on
//! residuals, volatility-VAR coefficients, innovation covariance by inverse
//! Wishart); the latent volatility paths are drawn country-by-country with a
//! conditional particle filter with ancestor sampling that handles the
//! degenerate transition created by stacking lagged volatilities into the
//! state.
//!
//! The crate also ships a simulator used as ground truth in recovery tests,
//! an impulse-response engine for level and volatility shocks with posterior
//! coverage bands, and chain diagnostics including a joint-distribution
//! (getting-it-right) validator.

pub mod config;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod gibbs;
pub mod irf;
pub mod model;
pub mod output;
pub mod panel;
pub mod pgas;
pub mod rng;
pub mod runner;
pub mod sim;

pub use error::{Error, Result};
pub use model::{
    ImpactMatrix, MeanCoefficients, ModelSpec, ParameterSet, PriorSpec, VolatilityParams,
    VolatilityStates,
};
pub use panel::{CountryMeta, PanelDataset};

/// Software version embedded in all output files.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
