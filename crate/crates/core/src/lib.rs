//! Ensemble transform Kalman-Bucy filters and their benchmarks.
//!
//! The analysis step is written as an ODE flow in pseudo-time `s ∈ [0, 1]`
//! and integrated either in state space or, for the transform filters, in
//! the `M`-dimensional ensemble space. An LETKF provides the closed-form
//! limit, and a twin-experiment harness runs everything on Lorenz-63 and
//! Lorenz-96.

pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod filters;
pub mod harness;
pub mod loc_inflate;
pub mod oracle;
pub mod obs;
pub mod pseudo_time;

pub use error::{Error, Result};
