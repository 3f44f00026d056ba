//! File-level driver for the `slpca` binary: CSV loading, model output,
//! run manifests and the subcommands themselves.

pub mod commands;
pub mod error;
pub mod io;
pub mod manifest;
pub mod specfile;

pub use commands::{run, Cli};
pub use error::CliError;
pub use io::{load_matrix, read_model, write_model};
pub use manifest::RunManifest;
