use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sioms_core::report::ReportFormat;

#[derive(Debug, Parser)]
#[command(name = "sioms", version, about = "Optimal mode scheduling for switched linear systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimise one mode schedule over the scenario horizon.
    Solve(CommonArgs),
    /// Compare the table-based optimiser with Euler re-simulation across sample counts.
    Bench(CommonArgs),
    /// Open-loop versus receding-horizon costs under a randomly perturbed plant.
    Montecarlo(CommonArgs),
    /// Closed-loop receding-horizon run with the scenario's disturbances.
    Rh(CommonArgs),
    /// Serve live closed-loop sessions over WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Structured,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Structured => ReportFormat::Structured,
        }
    }
}

/// Flags shared by the batch commands. Each one overrides the matching
/// scenario-file setting.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Built-in scenario name (spring_mass, cart_mass) or path to a scenario file.
    pub scenario: String,
    /// Iteration budget: solver.max_iter (solve), bench.iterations (bench),
    /// rh.inner_iterations (rh), montecarlo.open_loop_iterations (montecarlo).
    #[arg(long)]
    pub iters: Option<usize>,
    /// Table sample count: solver.samples (solve) or the comma-separated
    /// bench.samples list (bench).
    #[arg(long, value_delimiter = ',')]
    pub samples: Option<Vec<usize>>,
    /// montecarlo.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// output.dir
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// output.format
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// rh.delta or montecarlo.delta
    #[arg(long)]
    pub delta: Option<f64>,
    /// rh.horizon or montecarlo.horizon
    #[arg(long)]
    pub horizon: Option<f64>,
    /// montecarlo.runs
    #[arg(long)]
    pub runs: Option<usize>,
    /// output.timings: also write wall-clock timing files.
    #[arg(long)]
    pub timings: bool,
    /// output.cache: directory for cached transition tables.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Address to listen on.
    #[arg(long, env = "SIOMS_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: String,
    /// Directory of static files served at `/`.
    #[arg(long = "static", env = "SIOMS_STATIC")]
    pub static_dir: Option<PathBuf>,
    /// Scenario used for new sessions unless a request names another.
    #[arg(long, default_value = "cart_mass")]
    pub scenario: String,
    /// Default simulated-to-wall-clock ratio; 0 runs as fast as possible.
    #[arg(long, default_value_t = 1.0)]
    pub ratio: f64,
}
