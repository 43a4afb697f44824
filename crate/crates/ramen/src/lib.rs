//! Std companion to `ramen-core`: file formats, run manifests, the engine
//! timing harness, numerical self-checks, and the `ramen` command line.

pub mod bench;
pub mod commands;
mod error;
pub mod io;
pub mod manifest;
pub mod method;
pub mod verify;

pub use error::{Error, Result};
pub use method::Method;
pub use ramen_core as core;
