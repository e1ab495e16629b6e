//! Maximal stationary information rate of power-constrained Gaussian
//! channels with ARMA noise and delayed feedback.
//!
//! The noise channel is rewritten as an ISI channel with white noise whose
//! output is fed back instantly ([`channel_model`]). A Kalman filter tracks
//! the receiver's posterior on the channel state ([`kalman`]); the rate of a
//! stationary Gauss-Markov source follows from the filter's Riccati fixed
//! point and is maximized under the power constraint in [`capacity`].
//! [`simulator`] holds Monte Carlo and exact-Gaussian cross-checks.

pub mod capacity;
pub mod channel_model;
pub mod cli;
pub mod error;
pub mod gaussian;
pub mod kalman;
pub mod optimizer;
pub mod quadrature;
pub mod rng;
pub mod simulator;
pub mod verify;

pub use capacity::{
    calibrate_e, finite_horizon_rate, optimize_capacity, rate_of, sweep, szego_rate_check,
    CapacityResult, OptimizeOptions, SweepAxis, SweepRow,
};
pub use channel_model::{
    build_state_space, equivalent_channel_response, noise_psd, pad_orders, validate_arma_spec,
    ArmaNoiseSpec, StateSpaceChannel,
};
pub use error::{Error, Result};
pub use kalman::{
    innovation_stats, kalman_step, riccati_map, riccati_residual, solve_riccati,
    stationary_power, PosteriorState, SourcePolicy,
};
