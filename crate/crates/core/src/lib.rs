//! Model predictive learning with assistance-aware input optimization.
//!
//! An LSTM learns the joint dynamics of state, input and assistance
//! probability from teacher demonstrations. At run time the input is refined
//! by gradient descent through the frozen model so that predicted states,
//! inputs and assistance stay close to references.

pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod executor;
pub mod model;
pub mod nn;
pub mod optimizer;
pub mod server;
pub mod teacher;

pub use error::{Error, Result};
