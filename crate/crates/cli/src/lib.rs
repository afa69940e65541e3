//! Command-line front end and the reader-study HTTP service.

pub mod commands;
pub mod error;
pub mod raster;
pub mod server;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
