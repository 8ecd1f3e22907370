//! Estimation and inference for average treatment effects (ATE) under
//! covariate-adaptive randomization (CAR) when the regression adjustment
//! uses many regressors.
//!
//! The crate provides:
//!
//! - [`data`]: dataset container, CSV ingestion, strata indexing, and
//!   estimability validation;
//! - [`randomize`]: the four classic CAR assignment schemes (SRS, WEI,
//!   BCD, SBR) behind a common [`randomize::Scheme`] trait;
//! - [`dgp`]: synthetic experiment generators (six models) for the
//!   Monte Carlo study;
//! - [`olskernel`]: per-(arm, stratum) OLS machinery — intercepts,
//!   leverages, annihilator row sums, leave-one-out residuals — without
//!   materializing the annihilator matrix;
//! - [`estimate`]: the unadjusted, fully saturated adjusted, and
//!   optimally combined ATE estimators;
//! - [`covariance`]: estimators of the joint 2x2 asymptotic covariance
//!   of the adjusted and unadjusted estimators, including the cross-fit
//!   estimator that prices in the estimation error of the adjustment;
//! - [`inference`]: Wald tests, confidence intervals, and the
//!   K-estimator combination test;
//! - [`rmt`]: Marchenko-Pastur quantities (the variance inflation
//!   factor and the Gaussian-design `gamma` limit);
//! - [`mc`]: a seed-reproducible, parallel Monte Carlo harness;
//! - [`rngstat`]: counter-based RNG streams and shared numerical
//!   primitives (normal CDF/quantile, fixed-order reductions).

pub mod covariance;
pub mod data;
pub mod dgp;
pub mod error;
pub mod estimate;
pub mod inference;
pub mod mc;
pub mod olskernel;
pub mod randomize;
pub mod rmt;
pub mod rngstat;

pub use error::{Error, Result};
