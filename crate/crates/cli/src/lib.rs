//! Command implementations for the `condmmd` binary.
//!
//! Each `cmd_*` function runs one subcommand, writes its human-readable
//! output to the given writer and returns a [`CliError`] whose
//! [`exit_code`](CliError::exit_code) the binary forwards to the shell.

pub mod commands;
pub mod config;
pub mod error;
pub mod varbench;
pub mod verify;

pub use commands::{cmd_eval, cmd_synth, cmd_train};
pub use config::{RunConfig, SEED_ENV};
pub use error::{CliError, CliResult};
pub use varbench::cmd_varbench;
pub use verify::{cmd_verify, Mutation};
