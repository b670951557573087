//! Spiking neurons as first-order optimizers.
//!
//! Integrate-and-fire style neurons are executed as discrete dynamical systems and
//! checked step for step against the subgradient or sign-gradient iteration they
//! implement. On top of the neuron models sits a small ANN graph toolkit that
//! rewrites dense/conv/pool/norm networks into spiking networks and runs them.
//!
//! Conventions used throughout:
//! - the step function fires on ties, `heaviside(0.0) == 1.0`, and `sign(0) = +1`;
//! - time starts at `t = 1` for the first emitted spike or current.

pub mod codec;
pub mod engine;
pub mod error;
pub mod graph;
pub mod neurons;
pub mod oracles;
pub mod replay;
pub mod schedules;

pub use error::{Error, Result};
