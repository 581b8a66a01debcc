//! Probabilistic mid-term hourly electricity load forecasting.
//!
//! Load is decomposed into calendar, smoothed-temperature, weekly
//! socio-economic state and autoregressive effects with penalized-spline
//! additive models. Forecast distributions are trajectory ensembles built by
//! simulating three independent stochastic stages (temperature, weekly state,
//! hourly autoregression), each with a cross-series Gaussian error covariance.

pub mod autoreg;
pub mod cointegration;
pub mod ensemble;
pub mod error;
pub mod gam;
pub mod ingest;
pub mod linalg;
pub mod pipeline;
pub mod scoring;
pub mod splines;
pub mod statespace;
pub mod timebase;

pub use error::{Error, Result};
