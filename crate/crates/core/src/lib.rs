pub mod bsde;
pub mod cli;
pub mod condexp;
pub mod error;
pub mod generators;
pub mod lab;
pub mod local;
pub mod oracles;
pub mod paths;
pub mod rbsde;

pub use error::{Error, Result};
