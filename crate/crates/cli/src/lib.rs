//! Command implementations and the probe service behind the `cellseg` binary.

pub mod commands;
pub mod probe;
