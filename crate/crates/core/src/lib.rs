//! Simulation toolkit for randomly biased random walks on trees whose
//! conductances come from a branching random walk.
//!
//! Modules:
//! * [`env`]: reproduction laws, κ, lazily expanded environment trees,
//!   the additive martingale and the minimum of the branching random walk;
//! * [`walk`]: the quenched walk and its edge local times;
//! * [`ltgw`]: the multi-type Galton–Watson tree of edge local times;
//! * [`spine`]: size-biased spinal constructions;
//! * [`rw1d`]: tilted one-dimensional walks and ladder renewal functions;
//! * [`stats`]: heavy-tail fits and two-sample tests.

pub mod env;
pub mod error;
pub mod ltgw;
pub mod par;
pub mod rng;
pub mod rw1d;
pub mod spine;
pub mod stats;
pub mod walk;

pub use env::{Kappa, KappaResult, ReproductionLaw};
pub use error::{Error, Result};
