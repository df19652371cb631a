//! Numerical core for Bernstein reciprocal diffusions.
//!
//! Given a Hamiltonian `H = -(hbar^2/2) d^2/dx^2 + V` on a one-dimensional
//! grid and two strictly positive boundary densities, this crate
//!
//! * assembles the positive propagator kernel of `exp(-(u-s) H / hbar)`
//!   ([`kernel`]),
//! * solves the nonlinear boundary system for the pair `(eta*_s, eta_u)` by
//!   iterative proportional fitting and propagates it over a time grid
//!   ([`schroedinger`]),
//! * derives forward/backward drifts, simulates the diffusion in both time
//!   directions and evaluates the three stochastic integrals ([`dynamics`]),
//! * checks the deformed Euler-Lagrange, Hamilton and Hamilton-Jacobi-Bellman
//!   laws together with the energy martingale ([`variational`]),
//! * validates symmetry triples, Noether martingale charges and the scaling
//!   Doob transform ([`noether`]).
//!
//! The crate is `no_std` and only needs `alloc`. Transcendental functions go
//! through `libm` via [`num_traits::Float`].

#![no_std]
// Once any crate in the graph links std, its inherent float methods shadow
// `num_traits::Float`, leaving the trait imports unused.
#![allow(unused_imports)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod dynamics;
pub mod error;
pub mod expr;
pub mod field;
pub mod grid;
pub mod kernel;
pub mod noether;
pub mod numerics;
pub mod potential;
pub mod rng;
pub mod schroedinger;
pub mod stats;
pub mod variational;

pub use error::{Error, Result};
pub use grid::{SpatialGrid, TimeGrid};
pub use potential::{DeformationConfig, Potential};
