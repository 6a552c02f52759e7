//! Multi-level call center with level reservation.

pub mod cli;
pub mod error;
pub mod invert;
pub mod mdp;
pub mod model;
pub mod rates;
pub mod sim;
pub mod solve;
pub mod transient;
pub mod waiting;

pub use error::{Error, Result};
