//! `exedit` command-line front end.
//!
//! Exit codes: 0 on success, 1 when a command fails, 2 on usage errors
//! (bad flags, unreadable `--config`, invalid edit options).

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use args::{resolve_options, Cli, Command, ConfigFile, Settings};

enum Failure {
    Usage(String),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Domain(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.global.config {
        Some(path) => ConfigFile::load(path).map_err(Failure::Usage)?,
        None => ConfigFile::default(),
    };
    let s = Settings::resolve(&cli.global, &cfg);
    let options = |flags| resolve_options(flags, s.seed, &cfg).map_err(Failure::Usage);
    match &cli.command {
        Command::Edit { inputs, options: o } => commands::edit(&s, inputs, &options(o)?)?,
        Command::Sweep { inputs, options: o, lambdas } => {
            if let Some(l) = lambdas.iter().find(|l| !l.is_finite()) {
                return Err(Failure::Usage(format!("lambda must be finite, got {l}")));
            }
            commands::sweep(&s, inputs, &options(o)?, lambdas)?
        }
        Command::Ablate { inputs, options: o } => commands::ablate_cmd(&s, inputs, &options(o)?)?,
        Command::Invert { y, inversion_steps, reconstruct } => {
            commands::invert(&s, y, *inversion_steps, reconstruct.as_deref(), &cfg)?
        }
        Command::Eval { manifest, results, method } => commands::eval(&s, manifest, results, method)?,
        Command::Curate { action } => commands::curate(&s, action)?,
        Command::Serve(args) => commands::serve(&s, args, &cfg)?,
    }
    Ok(())
}

/// The error chain, skipping causes already spelled out by their parent.
fn render(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_env("EXEDIT_LOG").unwrap_or_else(|_| EnvFilter::new(level)))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(1)
        }
    }
}
