//! Command line and HTTP front ends for semantic splatting scenes.

pub mod assets;
pub mod cli;
pub mod server;

pub use cli::run;
