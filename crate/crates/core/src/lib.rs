//! Transient random walks and birth-death processes in random environments.
//!
//! Two routes to the same quantities: exact computations driven by the
//! environment (Lyapunov spectra, exit probabilities, branching-structure
//! series for the velocity) and Monte Carlo simulation of the processes.
//! Each is used to check the other.

// `!(x > 0.0)` is how parameter checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bdp;
pub mod env;
pub mod error;
pub mod exact2;
pub mod linalg;
pub mod lyapunov;
pub mod report;
pub mod rng;
pub mod rwre;
pub mod stats;

pub use error::{Error, Result};
