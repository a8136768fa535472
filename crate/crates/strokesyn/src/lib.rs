//! File formats, checkpoints, run configuration and the command-line tool
//! around `strokesyn-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod io;
pub mod manifest;
