//! Config, file formats, benchmarks and command-line front end for
//! `mpcil-core`.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod run;

pub use config::RunConfig;
pub use error::{Error, Result};
