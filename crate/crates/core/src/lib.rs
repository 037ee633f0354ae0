//! Mortality modelling toolkit built around linear mixed-effects models of
//! log death rates.
//!
//! The pipeline runs from HMD-style rate files ([`panel`]) through covariate
//! construction ([`covariates`]), REML fitting ([`mixedlm`]), cleaning and
//! model selection ([`selection`]) to forecasts ([`projection`]), reference
//! models ([`benchmarks`]), life tables ([`lifetable`]) and annuity
//! liabilities ([`actuarial`]).

pub mod error;
pub mod panel;
pub mod covariates;
pub mod seed;
pub mod mixedlm;
pub mod selection;
pub mod benchmarks;
pub mod lifetable;
pub mod actuarial;
pub mod projection;
pub mod synthetic;

pub use error::{Error, Result};
