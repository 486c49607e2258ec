use clap::{Args, Parser, Subcommand};
use qvcbi_cli::commands::{cmd_eval, cmd_fit, cmd_pipeline, cmd_synth, CliError, Invocation};
use qvcbi_cli::config::RunConfig;
use std::path::PathBuf;

/// Joint building-damage, landslide, and liquefaction estimation from
/// damage-proxy rasters.
#[derive(Parser)]
#[command(name = "qvcbi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a scene from a named preset.
    Synth(Common),
    /// Fit posteriors and weights on the configured scene.
    Fit(Common),
    /// Evaluate fitted posterior grids against ground truth.
    Eval(Common),
    /// Synthesize (when configured), fit, then evaluate.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all available cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Force single-threaded, bit-exact execution.
    #[arg(long)]
    deterministic: bool,
}

fn run(cmd: &Command) -> Result<(), CliError> {
    let common = match cmd {
        Command::Synth(c) | Command::Fit(c) | Command::Eval(c) | Command::Pipeline(c) => c,
    };
    let cfg = RunConfig::load(&common.config)?;
    let inv = Invocation {
        out_override: common.out.clone(),
        seed_override: common.seed,
        workers: common.workers,
        deterministic: common.deterministic,
        ..Invocation::from_env()
    };
    match cmd {
        Command::Synth(_) => cmd_synth(&cfg, &inv).map(|_| ()),
        Command::Fit(_) => cmd_fit(&cfg, &inv).map(|_| ()),
        Command::Eval(_) => cmd_eval(&cfg, &inv).map(|_| ()),
        Command::Pipeline(_) => cmd_pipeline(&cfg, &inv).map(|_| ()),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
