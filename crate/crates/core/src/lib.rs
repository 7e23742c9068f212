pub mod config;
pub mod costs;
pub mod dynamics;
pub mod error;
pub mod feedback;
pub mod harness;
pub mod rmppi;
pub mod rng;
pub mod sampling;
pub mod selftest;

pub use error::{Error, Result};
