// SPDX-License-Identifier: Apache-2.0

//! Heteroskedastic hidden dynamic geostatistical model.
//!
//! A regression on covariates plus a scaled latent spatio-temporal field
//! (first-order autoregressive in time, exponential spatial correlation) and
//! day-specific measurement variance. The crate covers maximum-likelihood
//! fitting by EM over a Kalman smoother, kriging to unmonitored sites,
//! "what-if" covariate-reduction scenarios with analytic uncertainty,
//! validation diagnostics and a synthetic-data generator.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod emfit;
pub mod error;
pub mod geo;
pub mod io;
pub mod linalg;
pub mod model;
pub mod predict;
pub mod scenario;
pub mod sim;
pub mod statespace;

pub use emfit::{em_fit, EmOptions, FitReport, FittedModel, ModelParams};
pub use error::{Error, Result};
pub use geo::{CorrelationKernel, KernelFamily, Site, SiteSet};
pub use model::{
    CovariateTable, Interaction, ModelSpec, Moments, ObservationPanel, PredictionGrid, Season, SiteMeta,
    Standardization,
};
pub use predict::{krige_latent, predict_response, GridPrediction};
pub use scenario::{run_scenario, ScenarioResult, ScenarioSpec, SpatialMask, TimeWindow};
pub use sim::{simulate, SimOutput, SimSpec};
pub use statespace::{kalman_filter, kalman_smooth, observed_loglik, SmootherOutput, StateSpaceInputs};
