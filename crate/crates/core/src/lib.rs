//! Physics-regularized Gaussian process estimation of freeway traffic state.
//!
//! The crate layers three pieces: exact GP regression over detector grids
//! ([`gp`]), a second-order macroscopic link model used both as a simulator
//! and as a physics prior ([`metanet`]), and the regularized training loop
//! that couples them through discretized-dynamics residuals ([`physics`],
//! [`prgp`]). An extended Kalman filter over the same dynamics ([`ekf`]) and
//! a scenario harness ([`experiments`]) round out the toolkit; the `prgp`
//! binary exposes everything as a CLI.

pub mod data;
pub mod experiments;
pub mod gp;
pub mod linalg;
pub mod metanet;
pub mod ekf;
pub mod physics;
pub mod prgp;

pub use data::{Dataset, GridPoint, OutputDim};
pub use gp::{GpSpec, KernelParams};
pub use metanet::{MetanetParams, TrafficGrid};
pub use prgp::{PrgpModel, PrgpParams, TrainConfig};
