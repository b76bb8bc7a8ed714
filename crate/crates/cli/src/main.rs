mod args;
mod commands;
mod config_file;
mod error;

use std::ffi::OsString;
use std::fs;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use serde_json::json;

use args::{Cli, Command};
use error::{CliError, CliResult};

fn parse(argv: Vec<OsString>) -> CliResult<Option<Cli>> {
    let argv = config_file::expand_argv(&Cli::command(), argv)?;
    match Cli::try_parse_from(argv) {
        Ok(cli) => Ok(Some(cli)),
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{}", e.render());
            Ok(None)
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            Err(CliError::usage(first.to_string()).with(json!({ "clap": text })))
        }
    }
}

fn run(argv: Vec<OsString>) -> CliResult<()> {
    let Some(cli) = parse(argv)? else {
        return Ok(());
    };
    let g = &cli.global;
    fs::create_dir_all(&g.out_dir).map_err(|e| CliError::io(&g.out_dir, e))?;
    let mut effective = serde_json::to_value(&cli).expect("arguments serialise");
    effective["subcommand"] = json!(cli.command.name());
    let path = g.out_dir.join(commands::EFFECTIVE_CONFIG);
    let text = serde_json::to_string_pretty(&effective).expect("json value serialises");
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;

    match &cli.command {
        Command::Curate(a) => commands::curate(g, a),
        Command::Evaluate(a) => commands::evaluate(g, a),
        Command::Ensemble(a) => commands::ensemble(g, a),
        Command::TsFit(a) => commands::ts_fit(g, a),
        Command::Merge(a) => commands::merge_one(g, a),
        Command::Sweep(a) => commands::sweep(g, a),
        Command::Pareto(a) => commands::pareto(g, a),
        Command::AidTrace(a) => commands::aid_trace(g, a),
        Command::Extract(a) => commands::extract(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(std::env::args_os().collect()) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
