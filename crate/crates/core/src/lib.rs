//! Natural gradient optimization with higher-order-invariant update rules.
//!
//! The crate is organized around three layers:
//!
//! * coordinate-level Riemannian primitives ([`geometry`]) and an
//!   exactly-solvable Gamma maximum-likelihood testbed ([`gamma`]) with an
//!   analytic Fisher metric and Levi-Civita connection;
//! * a minimal feed-forward [`network`] engine supplying Fisher-vector and
//!   connection-vector products through forward R/S passes, plus the damped
//!   matrix-free [`solver`];
//! * the update rules themselves ([`optimizers`]) and reproducible
//!   experiments ([`harness`]).

pub mod error;
pub mod gamma;
pub mod geometry;
pub mod harness;
pub mod network;
pub mod objective;
pub mod optimizers;
pub mod solver;
pub mod special;

pub use error::{Error, Result};
pub use geometry::{ChristoffelTensor, GeodesicState, MetricMatrix, MetricPartials, ParamVector};
