//! `atwb` — the workbench pipeline as subcommands, in pipeline order:
//! synth -> train -> attack/evaluate -> explain -> report.
//!
//! Progress goes to stderr, machine output to files only. Exit codes:
//! 0 success, 1 invalid invocation or inputs, 2 runtime failure.

mod commands;
mod opts;

use std::process::ExitCode;

const USAGE: &str = "usage: atwb <command> [flags]

commands:
  synth      generate the synthetic blob-vs-ring dataset
  train      train a baseline or attentive classifier
  attack     run a PGD attack at one radius
  evaluate   accuracy-vs-epsilon curve over a schedule
  explain    Grad-CAM and perturbation difference maps
  report     render curve CSVs into one SVG figure

run 'atwb <command> --help' for the command's flags.
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return ExitCode::from(1);
    };
    let rest = &args[1..];
    let result = match command.as_str() {
        "synth" => commands::synth::run(rest),
        "train" => commands::train::run(rest),
        "attack" => commands::attack::run(rest),
        "evaluate" => commands::evaluate::run(rest),
        "explain" => commands::explain::run(rest),
        "report" => commands::report::run(rest),
        "--help" | "-h" | "help" => {
            eprint!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        other => {
            eprintln!("unknown command {other:?}\n\n{USAGE}");
            return ExitCode::from(1);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("atwb {command}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
