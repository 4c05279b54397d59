//! `eqkd`: entanglement-based QKD post-processing from the command line.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | invalid usage or configuration |
//! | 3 | file I/O |
//! | 4 | could not reach the peer (connect timeout, handshake) |
//! | 5 | session aborted, or `sync` found no offset |
//! | 6 | key management error |

mod commands;
mod config;
mod endpoint;

use clap::{Parser, Subcommand};
use std::fmt;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CONNECT: i32 = 4;
pub const EXIT_ABORTED: i32 = 5;
pub const EXIT_KMS: i32 = 6;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(EXIT_IO, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Parser)]
#[command(name = "eqkd", version, about = "Entanglement-based QKD post-processing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a pair of time-tag files from the photon-pair source model
    Simulate(commands::SimulateArgs),
    /// Run the Alice endpoint of a session
    Alice(endpoint::EndpointArgs),
    /// Run the Bob endpoint of a session
    Bob(endpoint::EndpointArgs),
    /// Beam-spread loss table and SKR extrapolation
    Linkbudget(commands::LinkbudgetArgs),
    /// Fetch key material from a key store
    KmsGet(commands::KmsGetArgs),
    /// Estimate the clock offset model between two time-tag files
    Sync(commands::SyncArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Alice(a) => endpoint::run(eqkd_core::Party::Alice, &a),
        Command::Bob(a) => endpoint::run(eqkd_core::Party::Bob, &a),
        Command::Linkbudget(a) => commands::linkbudget(&a),
        Command::KmsGet(a) => commands::kms_get(&a),
        Command::Sync(a) => commands::sync(&a),
    };
    if let Err(e) = result {
        eprintln!("eqkd: {e}");
        std::process::exit(e.code);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
