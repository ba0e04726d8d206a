//! Nonlinear sheaf-Laplacian dynamics on directed graphs and recovery of edge
//! interaction potentials from trajectory data.
//!
//! The numerical core is generic over the scalar type ([`Real`], implemented
//! for `f32` and `f64`); the `*64` aliases below fix it to `f64`, which is what
//! the experiment harness and the command-line tool use.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coboundary;
pub mod cochain;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod io;
pub mod potentials;
pub mod scalar;
pub mod sheaf;
pub mod sysid;

pub use coboundary::{CoboundaryOperator, EdgeSpace, HarmonicSpace, SectionSpace};
pub use cochain::{BlockLayout, Cochain0, Cochain1};
pub use dynamics::{SimConfig, Trajectory};
pub use error::{Error, Result};
pub use graph::{DirectedGraph, Edge};
pub use potentials::{EdgePotential, NodeField, NodePotential, ParametricFamily};
pub use scalar::Real;
pub use sheaf::{EdgeStalk, Sheaf};
pub use sysid::{EstimationResult, IdentifiabilityReport, ResidualDataset, ResidualSource};

pub type Sheaf64 = Sheaf<f64>;
pub type Sheaf32 = Sheaf<f32>;
pub type Coboundary64 = CoboundaryOperator<f64>;
pub type Coboundary32 = CoboundaryOperator<f32>;
pub type Cochain0f64 = Cochain0<f64>;
pub type Cochain1f64 = Cochain1<f64>;
