//! Library side of the `srepa` command-line tool.

pub mod commands;
pub mod exit;
pub mod sweep;
