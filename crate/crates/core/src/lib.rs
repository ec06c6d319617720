//! Bayesian recovery curves: the curve family, its hierarchical model, an
//! MCMC sampler, synthetic-data experiments, data ingestion and
//! cross-validation.

pub mod curves;
pub mod data;
pub mod dists;
pub mod evaluate;
pub mod model;
pub mod predict;
pub mod sampler;
pub mod simulate;

/// Survey months of the follow-up schedule.
pub const SURVEY_MONTHS: [u32; 11] = [1, 2, 4, 8, 12, 18, 24, 30, 36, 42, 48];
