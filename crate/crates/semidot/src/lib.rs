//! Semi-discrete transport and entropy gradient flows on a product of a
//! Euclidean box and a finite weighted graph.
//!
//! The state space is `[-L, L]^d x G` for a finite weighted graph `G`:
//! densities have a continuum coordinate and a discrete node coordinate,
//! mass moves by diffusion and drift inside each node's copy of the box and
//! jumps between nodes along graph edges. The crate provides
//!
//! * first-order calculus on graphs ([`graph`]),
//! * grids, densities, potentials, and the relative entropy ([`domain`],
//!   [`potentials`]),
//! * mobility (mean) functions weighting the jump part ([`mobility`]),
//! * the reaction-diffusion evolution driven by the entropy ([`pde`]),
//! * a static transport cost between densities and the induced
//!   minimizing-movement (JKO) scheme ([`statics`], [`jko`]),
//! * dynamic-transport diagnostics: continuity equation, kinetic action,
//!   distances, geodesics, and damped second-order dynamics ([`dynamics`]),
//! * a configuration-driven experiment runner used by the `semidot`
//!   command-line tool ([`config`], [`run`]).

pub mod domain;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod jko;
pub mod mobility;
pub mod pde;
pub mod potentials;
pub mod statics;

pub use error::{Error, Result};
