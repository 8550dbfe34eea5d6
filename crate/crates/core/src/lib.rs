//! Short-term energy demand forecasting engine.

pub mod baselines;
pub mod evaluation;
pub mod forecast;
pub mod lstm;
pub mod numeric;
pub mod timeseries;
pub mod training;

/// Seed used whenever the caller does not supply one.
pub const DEFAULT_SEED: u64 = 20_240_601;
