//! `guidelab`: command-line driver for the toy guidance experiments.
//!
//! Exit status is 0 on success, 1 for usage errors, 2 for numeric failures
//! and 3 for I/O failures. Failures also print one JSON object on stderr.

mod args;
mod commands;
mod repro;
mod settings;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches};
use guidelab::{Error, ErrorClass};

use args::{Cli, Command};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "GUIDELAB_OUT";

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Numeric => 2,
        ErrorClass::Io => 3,
    }
}

fn report(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    json_report(err)
}

/// Prints only the machine-readable line.
fn json_report(err: &Error) -> ExitCode {
    let class = err.class();
    let code = exit_code(class);
    let kind = match class {
        ErrorClass::Usage => "usage",
        ErrorClass::Numeric => "numeric",
        ErrorClass::Io => "io",
    };
    let line = serde_json::json!({ "error": { "kind": kind, "exit_code": code, "message": err.to_string() } });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn clap_failure(e: clap::Error) -> ExitCode {
    let _ = e.print();
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        return ExitCode::SUCCESS;
    }
    let rendered = e.render().to_string();
    let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
    json_report(&Error::InvalidArgument(first.to_string()))
}

/// Long flags accepted by `subcommand`, plus the global ones.
fn known_keys(subcommand: &str) -> BTreeSet<String> {
    let cmd = Cli::command();
    let mut keys: BTreeSet<String> = cmd
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect();
    if let Some(sub) = cmd.find_subcommand(subcommand) {
        keys.extend(sub.get_arguments().filter_map(|a| a.get_long().map(str::to_string)));
    }
    keys
}

fn parse(argv: &[OsString]) -> Result<Cli, clap::Error> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

fn run(argv: Vec<OsString>) -> ExitCode {
    // The config file is spliced in before clap sees the arguments, so it can
    // supply required options too.
    let argv = match settings::config_path(&argv) {
        None => argv,
        Some(path) => {
            let sub = settings::subcommand_name(&argv).unwrap_or_default();
            match settings::splice_config(&argv, &path, &known_keys(&sub)) {
                Ok(v) => v,
                Err(e) => return report(&e),
            }
        }
    };
    let cli = match parse(&argv) {
        Ok(c) => c,
        Err(e) => return clap_failure(e),
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report(&Error::InvalidArgument(format!("cannot configure {n} threads: {e}")));
        }
    }
    let result = match cli.command {
        Command::MakeData(a) => commands::make_data(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::CorruptExperiment(a) => commands::corrupt_experiment(a),
        Command::Render(a) => commands::render(a),
        Command::Repro(a) => repro::repro(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn main() -> ExitCode {
    run(std::env::args_os().collect())
}
