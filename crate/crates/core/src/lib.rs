pub mod assignment;
pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod single_stage;
pub mod two_stage;

pub use error::{Error, Result};
