//! Command-line pipeline for coherence-aware retrieval.

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod server;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

use crate::args::Cli;
use crate::commands::Run;
use crate::config::Settings;
use crate::manifest::RunRecorder;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let name = cli.command.name();
    let settings = match Settings::load(cli.config.as_deref(), name) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let run = Run {
        settings,
        recorder: RunRecorder::new(name, &argv),
        manifest: cli.manifest,
    };
    match commands::execute(cli.command, run) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
