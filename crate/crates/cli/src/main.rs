mod args;
mod commands;
mod error;

use std::net::SocketAddr;
use std::process::ExitCode;

use clap::Parser;
use sioms_core::scenario::Scenario;

use args::{Cli, Command, ServeArgs};
use error::CliError;

fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let listen: SocketAddr = args.listen.parse().map_err(|e| CliError::Config(format!("invalid listen address {}: {e}", args.listen)))?;
    let scenario = Scenario::resolve(&args.scenario)?;
    let config = sioms_live::ServerConfig { listen, static_dir: args.static_dir.clone(), scenario, ratio: args.ratio, max_sessions: 8 };
    sioms_live::serve_blocking(config).map_err(|e| match e {
        sioms_live::LiveError::Io(m) => CliError::Io(m),
        sioms_live::LiveError::Numerical(m) => CliError::Numerical(m),
        other => CliError::Config(other.to_string()),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(a) => commands::solve_cmd(a),
        Command::Bench(a) => commands::bench_cmd(a),
        Command::Montecarlo(a) => commands::montecarlo_cmd(a),
        Command::Rh(a) => commands::rh_cmd(a),
        Command::Serve(a) => {
            tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into())).init();
            serve(a)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
