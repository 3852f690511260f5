mod args;
mod config;
mod error;
mod run;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use crate::args::{Cli, Command};
use crate::config::RunConfig;
use crate::error::Result;

fn resolve(cli: &Cli) -> Result<RunConfig> {
    match &cli.command {
        Command::Train(a) => config::resolve_train(a),
        Command::Attack(a) => config::resolve_attack(a),
        Command::Eval(a) => config::resolve_eval(a),
        Command::Sweep(a) => config::resolve_sweep(a),
        Command::Export(a) => Ok(config::resolve_export(a)),
        Command::Replay(a) => {
            let mut cfg = RunConfig::read(&a.config)?;
            if let Some(out) = &a.out {
                cfg.out = out.clone();
            }
            Ok(cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match resolve(&cli).and_then(|cfg| run::execute(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
