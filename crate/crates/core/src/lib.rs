//! Zvonkin transformation of reflected diffusions with bounded measurable drift.
//!
//! The crate builds, piece by piece, the constructive pipeline behind strong
//! uniqueness for
//!
//! ```text
//! X_t = x + W_t + ∫ b(s, X_s) ds + L_t,   L_t = ∫ n(X_s) d|L|_s
//! ```
//!
//! on a smooth bounded domain `D ⊂ R^d` (`d ∈ {1, 2}`):
//!
//! * [`geometry`]: preset domains, nearest-point projection, normals, cones.
//! * [`fields`]: drift presets, mollification, gridded space-time fields.
//! * [`pde`]: the backward Neumann system for `u`, its reflection across the
//!   boundary and a Hölder fit in time.
//! * [`zvonkin`]: the transform `x ↦ u(t, x)`, its inverse, Jacobian and
//!   bi-Lipschitz checks, selection of `T₁`, cone conditions and `θ₁`.
//! * [`flows`]: the reflecting direction `γ`, its flow, Jacobian flow and
//!   hyperplane hitting times.
//! * [`testfns`]: the local bump `h`, the boundary function `H`, the
//!   Dupuis-type `g` and the pair function `f_ε`.
//! * [`sde`]: reflected Euler schemes, the Krylov check and the Itô residual.
//! * [`uniqueness`]: common-noise pairs, the Lyapunov decomposition and the
//!   `A¹` sign check.
//!
//! Every empirically chosen constant lives in a [`ledger::ConstantsLedger`].
//! Points are stored as [`Vec2`] in both dimensions; in one dimension the
//! second coordinate is identically zero.

pub mod cli;
pub mod config;
pub mod error;
pub mod fields;
pub mod flows;
pub mod geometry;
pub mod io;
pub mod ledger;
pub mod linalg;
pub mod pde;
pub mod pipeline;
pub mod quadrature;
pub mod sde;
pub mod smooth;
pub mod stats;
pub mod testfns;
pub mod uniqueness;
pub mod zvonkin;

/// A point or vector; the second entry is zero in one dimension.
pub type Vec2 = nalgebra::Vector2<f64>;
/// A 2×2 matrix; in one dimension only the `(0, 0)` entry is meaningful and
/// the `(1, 1)` entry is kept at 1 for Jacobians.
pub type Mat2 = nalgebra::Matrix2<f64>;

pub use error::{Error, Result};
pub use geometry::{Cone, DomainSpec, TubeNeighborhood};
pub use ledger::{ConstantsLedger, Provenance};
