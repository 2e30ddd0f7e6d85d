//! Affine-equivariant learned proximal networks.
//!
//! A learned proximal network is the input gradient of a convex scalar
//! potential, so it is an exact proximal operator for some implicit
//! regularizer. This crate builds such potentials from input-convex
//! networks and wraps them so that the resulting operator also commutes
//! with positive scalings and constant shifts of its input:
//!
//! ```text
//! f(a x + b 1) = a f(x) + b 1,   a > 0
//! ```
//!
//! The main entry points are [`potential::ProxModel`] (build and evaluate
//! operators), [`training::train`] (ℓ1 pretraining followed by proximal
//! matching), and [`analysis`] (prox inversion, implicit regularizer,
//! convexity and equivariance audits).

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod diff;
pub mod error;
pub mod experiments;
pub mod icnn;
pub mod loss;
pub mod math;
pub mod potential;
pub mod report;
pub mod rng;
pub mod split_normal;
pub mod training;

pub use error::{Error, Result};
pub use math::Signal;
pub use potential::{PotentialVariant, ProxModel, VariantKind};

pub use rng::Rng;
