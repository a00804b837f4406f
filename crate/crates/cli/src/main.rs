mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Command, CommandFactory, FromArgMatches};

use args::Cli;

const EXIT_USER: u8 = 1;
const EXIT_INTERNAL: u8 = 2;

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|info| {
        let msg = info
            .payload()
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| info.payload().downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        eprintln!("gblend: internal error: {}", first_line(&msg));
    }));
    match std::panic::catch_unwind(run) {
        Ok(code) => code,
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}

fn run() -> ExitCode {
    let cmd = override_self(Cli::command());
    let argv = match config::expand(&cmd, std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return fail(EXIT_USER, &e),
    };
    let matches = match cmd.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprintln!("gblend: {}", first_line(text.trim_start_matches("error: ")));
            return ExitCode::from(EXIT_USER);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("gblend: {}", first_line(&e.to_string()));
            return ExitCode::from(EXIT_USER);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("gblend: --threads must be at least 1");
            return ExitCode::from(EXIT_USER);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("gblend: internal error: {e}");
            return ExitCode::from(EXIT_INTERNAL);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(exit_code(&e), &e),
    }
}

/// Later occurrences of a flag replace earlier ones in every subcommand, so
/// command-line flags beat config-file values.
fn override_self(cmd: Command) -> Command {
    let names: Vec<String> = cmd
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .collect();
    names.iter().fold(cmd.args_override_self(true), |c, n| {
        c.mut_subcommand(n, override_self)
    })
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use gblend::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::NonFiniteRecord { .. } | E::NonFiniteGradient { .. } | E::TraceMismatch(_)) => {
            EXIT_INTERNAL
        }
        _ => EXIT_USER,
    }
}

fn fail(code: u8, e: &anyhow::Error) -> ExitCode {
    // Library errors already embed their source in the message.
    let mut msg = String::new();
    for cause in e.chain().map(|c| c.to_string()) {
        if !msg.ends_with(&cause) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&cause);
        }
    }
    eprintln!("gblend: {}", first_line(&msg));
    ExitCode::from(code)
}

fn first_line(s: &str) -> &str {
    s.lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or(s)
        .trim_end()
}
