//! Finite-dimensional Malliavin calculus over explicit noise vectors.
//!
//! The crate treats a random object as a smooth function of finitely many
//! noise coordinates, each carrying a weight and a known density. On top of
//! that representation it provides exact weighted-derivative jets, divergence
//! and Ornstein-Uhlenbeck operators, integration-by-parts weights with
//! localization, kernel-based density and distance estimators, and a
//! truncation/thinning toolkit for jump diffusions.

pub mod error;
pub mod density;
pub mod distance;
pub mod euler;
pub mod expr;
pub mod ibp;
pub mod jet;
pub mod jump;
pub mod localization;
pub mod malliavin;
pub mod mc;
pub mod noise;
pub mod profile;
pub mod rng;
pub mod sobolev;
pub mod taylor;

pub use error::{Error, Result};
pub use rng::Stream;
