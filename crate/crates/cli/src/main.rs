//! `pimap`: generate synthetic benchmarks, pretrain, personalize, index,
//! search, evaluate and serve.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (including
//! queries naming an unbound persona).

mod commands;

use clap::Parser;

fn main() {
    let cli = commands::Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    if let Err(e) = commands::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(commands::exit_code(&e));
    }
}
