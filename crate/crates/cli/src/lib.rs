//! Library side of the `turnlnl` command-line tool: config parsing, the
//! subcommands and their output writers.

pub mod commands;
pub mod config;
pub mod output;

use turnlnl::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// Process exit status for an error. Contract violations come from inputs
/// the config allowed but the library rejected, so they count as config
/// errors.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => EXIT_CONFIG,
        Error::Data(_) | Error::DataAt { .. } => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
    }
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
