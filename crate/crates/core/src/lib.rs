//! Structure-preserving time integration for Lagrangian systems.
//!
//! The crate builds discrete trajectories from a discrete variational
//! principle: a midpoint quadrature of the action replaces the exact action,
//! and stationarity of the discrete sum yields the update maps.  Two step
//! policies are provided:
//!
//! * **fixed step** — the classical discrete Euler-Lagrange update at constant
//!   step, with discrete energy logged as a diagnostic, and
//! * **adaptive step** — time is promoted to an unknown alongside position, so
//!   each step solves a momentum equation and an energy (or energy-balance)
//!   equation for the pair `(h, v)`.  Discrete energy is then conserved (or
//!   tracks the forcing work) to solver tolerance by construction.
//!
//! Dissipative terms enter through a discrete forcing pair in the same
//! quadrature, so damped systems are handled by the identical machinery.
//!
//! The crate is `no_std`-compatible (`alloc` required): enable the `libm`
//! feature instead of the default `std` feature to build without the standard
//! library.  All state is plain `f64`; nothing here spawns threads or does IO.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("semvi-core needs either the `std` or the `libm` feature for float math");

extern crate alloc;

pub mod diagnostics;
pub mod discrete;
pub mod integrators;
pub mod linalg;
mod math;
pub mod model;
pub mod solve;

pub use discrete::DiscretePair;
pub use integrators::{ExtendedState, IntegratorConfig, TrajectoryLog};
pub use model::{InitialCondition, SystemSpec};
