//! Diffusion models with a learnable forward process.
//!
//! The classical denoising-diffusion forward process corrupts data `x` into
//! `z_t = alpha_t x + sigma_t eps`. This crate generalizes the mean to a
//! time-dependent transform `F(x, t)`, so the latent marginal becomes
//! `N(alpha_t F(x, t), sigma_t^2 I)`, and provides everything needed to
//! train, sample, and evaluate such models on small densities:
//!
//! - noise schedules, continuous and discretized ([`schedule`]);
//! - transforms, from the identity (recovering the classical model exactly)
//!   to a learnable neural map ([`transform`]);
//! - the forward process and its posterior/score algebra ([`forward`]);
//! - discrete-time and continuous-time variational objectives plus the
//!   simple noise-matching loss ([`objective`]);
//! - ancestral, deterministic, SDE, and adaptive-ODE samplers
//!   ([`sampler`], [`solver`]) and exact ODE likelihoods ([`likelihood`]);
//! - a small autodiff engine purpose-built for these objectives ([`nn`]);
//! - toy datasets and distribution metrics ([`data`], [`metrics`]);
//! - a one-dimensional transport variant whose forward map is a learnable
//!   monotone flow ([`ot`]).
//!
//! Everything numeric is generic over the scalar type through [`num::Real`]
//! (instantiable at `f32` or `f64`); the `*64` aliases below are the
//! concrete types the binaries use.

pub mod error;
pub mod num;

pub mod checkpoint;
pub mod data;
pub mod forward;
pub mod likelihood;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod ot;
pub mod sampler;
pub mod schedule;
pub mod solver;
pub mod train;
pub mod transform;

pub use error::{Error, Result};

/// Double-precision noise schedule.
pub type Schedule64 = schedule::Schedule<f64>;
/// Double-precision forward transform.
pub type Transform64 = transform::Transform<f64>;
/// Double-precision diffusion model (schedule + transform + denoiser).
pub type Model64 = model::NdmModel<f64>;
/// Double-precision dataset with its normalization.
pub type Dataset64 = data::Dataset<f64>;
/// Double-precision monotone forward map for the transport variant.
pub type MonotoneMap64 = ot::MonotoneMap<f64>;
/// Double-precision transport-restricted model.
pub type OtModel64 = ot::OtModel<f64>;
