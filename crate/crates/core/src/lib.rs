//! Optimal execution against a stochastic market-volume process.
//!
//! Temporary impact is divided by instantaneous volume. The crate covers:
//!
//! * [`model`]: parameters, grids, schedules and the cost functional;
//! * [`volume`]: log-volume models, their moments and exact path sampling;
//! * [`strategies`]: TWAP, exact/expected VWAP and the closed-form optima;
//! * [`hjb`]: finite-difference solver for the penalised value function;
//! * [`expansion`]: small-noise expansion of the value function;
//! * [`montecarlo`]: cost estimation and strategy comparison sweeps.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod expansion;
pub mod hjb;
pub mod model;
pub mod montecarlo;
pub mod quad;
pub mod rng;
pub mod strategies;
pub mod timefn;
pub mod volume;

pub use error::{Result, VolexError};
pub use model::{holdings_from_rates, pathwise_cost, CostReport, ExecutionSchedule, MarketParams, TimeGrid};
pub use timefn::TimeFunction;
pub use volume::{VolumeModel, VolumePath};
