//! Index policies and discrete-event simulation for large-scale multi-rider
//! matching at a transport hub with reneging passengers.

pub mod error;
pub mod indices;
pub mod mdp;
pub mod network;
pub mod policies;
pub mod simulator;

pub use error::{Error, Result};
