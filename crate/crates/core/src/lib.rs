//! Fully implicit Bidomain solver: Newton outer iterations with GMRES on the
//! interface Schur complement, preconditioned by BDDC with rho or deluxe
//! scaling.

pub mod assembly;
pub mod bddc;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod ionic;
pub mod partition;
pub mod schur;
pub mod solvers;
pub mod sparse;

pub use error::{Error, LinalgError, Result};
