//! Stochastic unfolding on discrete stationary environments.
//!
//! The crate realizes a probability space with a measure-preserving shift
//! group as a finite shift torus (or an i.i.d. lattice for Monte Carlo work),
//! and builds on it the unfolding operator, corrector problems, convex
//! minimization at scale `eps` and in the homogenized limit, and implicit
//! time stepping of Allen-Cahn type gradient flows.

pub mod cell;
pub mod energy;
pub mod env;
pub mod flow;
pub mod error;
pub mod fem;
pub mod grid;
pub mod integrand;
pub mod linalg;
pub mod newton;
pub mod par;
pub mod rng;
pub mod study;
pub mod unfold;
pub mod varmin;

pub use env::{Cell, Ensemble, Environment, Phase, Quartic, Realization, SamplingPlan};
pub use error::{Error, Result};
pub use grid::{CellField, Domain, RandomField};
