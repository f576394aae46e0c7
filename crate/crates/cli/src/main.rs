use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cmfuot_cli::{cmd_solve, cmd_sweep, cmd_trace, Experiment, Overrides};

#[derive(Parser)]
#[command(name = "cmfuot", version, about = "Camera-fused acoustic source localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte-Carlo repetitions per sweep value.
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Methods to run: cmf-nnls, cmf-cd, cmf-uot.
    #[arg(long = "method", global = true, num_args = 1..)]
    methods: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve once per method and write power maps.
    Solve,
    /// Run a Monte-Carlo sweep and write result CSVs.
    Sweep,
    /// Run a traced greedy solve and write the per-update CSV.
    Trace,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = cli.config else {
        eprintln!("config error: --config is required");
        return ExitCode::from(2);
    };
    let overrides = Overrides { seed: cli.seed, runs: cli.runs, output: cli.out, methods: cli.methods };
    let result = Experiment::load(&config, overrides).and_then(|exp| {
        let mut stdout = std::io::stdout().lock();
        match cli.command {
            Command::Solve => cmd_solve(&exp, &mut stdout).map(|_| ()),
            Command::Sweep => cmd_sweep(&exp, &mut stdout),
            Command::Trace => cmd_trace(&exp, &mut stdout).map(|_| ()),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
