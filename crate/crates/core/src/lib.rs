//! Direct model predictive current control of a three-level NPC inverter
//! driving an induction machine, with a quadratic tail cost trained offline
//! from an iterated Bellman inequality.

pub mod adp;
pub mod augment;
pub mod config;
pub mod error;
pub mod fixed;
pub mod model;
pub mod mpc;
pub mod sdp;
pub mod sim;

pub use error::{Error, Result};
