//! Proximal learning of individualized treatment regimes.
//!
//! Bridge functions are estimated with closed-form kernel min-max solvers
//! ([`bridges`]), turned into weighted classification problems ([`policy`]),
//! and policies are scored with identified value functionals ([`evaluate`]).
//! [`simgen`] reproduces a structural generator with analytic ground truth.

pub mod bridges;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod folds;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod policy;
pub mod rng;
pub mod simgen;

pub use data::{Arm, SampleTable};
pub use error::{Error, Result};
