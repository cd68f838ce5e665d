//! Variation of complex-valued fields on weighted graphs and triangulated
//! surfaces.
//!
//! The variation of a field is computed three ways: as a supremum over unit
//! covector fields ([`variation::variation_dual`]), as the L1 norm of the
//! discrete gradient ([`variation::variation_gradient_l1`]) and as the
//! small-time limit of the gradient norm along the heat flow
//! ([`variation::variation_heatflow`]). Supporting modules cover the heat
//! semigroup, Ricci-type endomorphism fields and the 1-form heat semigroup,
//! exact Markov-chain Monte Carlo for Feynman-Kac functionals and Kato-class
//! moduli, and finite vector measures.

// NaN-rejecting checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod builtin;
pub mod curvature;
pub mod error;
pub mod geometry;
pub mod heat;
pub mod io;
pub mod registry;
pub mod sparse;
pub mod stochastic;
pub mod suite;
pub mod variation;
pub mod vecmeasure;

pub use error::{Error, Result};
pub use geometry::{DiscreteManifold, Edge, MetricRescale, Mode, OneForm, ScalarField, Triangle};
pub use heat::{HeatOperator, HeatParams};
