//! Bayesian evaluation of trial-level surrogate endpoints from aggregate
//! meta-analytic data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod crossval;
pub mod data;
pub mod error;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod report;
pub mod scale;
pub mod simgen;

pub use error::{Result, SurrogacyError};
