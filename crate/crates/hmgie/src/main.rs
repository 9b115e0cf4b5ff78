use std::io::{self, Write};

use clap::Parser;
use hmgie::cli::{self, Cli};

fn main() {
    let args: Vec<_> = std::env::args_os().collect();
    let env: Vec<(String, String)> = std::env::vars().collect();
    let verbosity = match Cli::try_parse_from(&args) {
        Ok(cli) => cli.verbose,
        Err(_) => 0,
    };
    let default_level = match verbosity {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .format_timestamp(None)
        .init();
    let stdout = io::stdout();
    let stderr = io::stderr();
    let code = cli::run(args, &env, &mut stdout.lock(), &mut stderr.lock());
    let _ = io::stdout().flush();
    std::process::exit(code);
}
