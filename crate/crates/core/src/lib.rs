pub mod carleson;
pub mod cli;
pub mod config;
pub mod cov;
pub mod error;
pub mod frame;
pub mod geometry;
pub mod green;
pub mod grid;
pub mod io;
pub mod perturb;
pub mod quad;
pub mod solvability;

pub use error::{Error, Result};
