//! Channel estimation for a full-duplex link relayed by a reconfigurable
//! intelligent surface: signal simulation, a least-squares baseline, a graph
//! attention network trained from scratch, and the experiment harness around
//! them.

pub mod channel;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod nn;
pub mod seeding;

pub use error::{Error, Result};
