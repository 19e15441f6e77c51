use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dte_core::harness::{self, ExperimentConfig, EPISODES_FILE};

/// Multi-head Q-learning experiments with competitive exclusion between heads.
#[derive(Parser)]
#[command(name = "dte", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and log every episode.
    Run(RunArgs),
    /// Summarise a finished (or interrupted) run.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 100)]
        window: usize,
    },
    /// Plot smoothed per-head returns as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        window: usize,
        /// Seed to plot; defaults to the first one logged.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// dte, multihead or dqn1
    #[arg(long)]
    agent: Option<String>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    /// One seed or a comma-separated list.
    #[arg(long)]
    seed: Option<String>,
    /// Comma-separated head sampling weights, e.g. 5,1
    #[arg(long)]
    head_weights: Option<String>,
    /// One actor, no threads, deterministic output.
    #[arg(long)]
    serial: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = ExperimentConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        config.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    let flags = [
        ("task", args.task),
        ("agent", args.agent),
        ("heads", args.heads.map(|v| v.to_string())),
        ("epsilon", args.epsilon.map(|v| v.to_string())),
        ("gamma", args.gamma.map(|v| v.to_string())),
        ("lambda", args.lambda.map(|v| v.to_string())),
        ("episodes", args.episodes.map(|v| v.to_string())),
        ("seeds", args.seed),
        ("head_weights", args.head_weights),
        ("out", args.out.map(|p| p.display().to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config.set(key, &v).with_context(|| format!("--{}", key.replace('_', "-")))?;
        }
    }
    for kv in &args.set {
        let Some((k, v)) = kv.split_once('=') else { bail!("--set expects KEY=VALUE, got `{kv}`") };
        config.set(k.trim(), v.trim()).with_context(|| format!("--set {kv}"))?;
    }
    if args.serial {
        config.serial = true;
    }
    if config.agent.variant == dte_core::learner::Variant::SingleDqn && args.heads.is_none() {
        config.agent.heads = 1;
    }
    if config.agent.head_weights.as_ref().is_some_and(|w| w.len() != config.agent.heads) && args.heads.is_none() {
        config.agent.heads = config.agent.head_weights.as_ref().map_or(1, Vec::len);
    }
    eprintln!("writing to {}", config.out_dir.display());
    let total = config.episodes;
    let logs = harness::run_experiment_with(&config, |log| {
        if (log.episode + 1) % 1000 == 0 || log.episode + 1 == total {
            eprintln!("seed {} episode {}/{}", log.seed, log.episode + 1, total);
        }
    })?
    .0;
    print!("{}", harness::report(&logs, config.window));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Report { input, window } => harness::read_csv(&input.join(EPISODES_FILE))
            .map(|logs| print!("{}", harness::report(&logs, window)))
            .map_err(Into::into),
        Command::Plot { input, out, window, seed } => (|| {
            let logs = harness::read_csv(&input.join(EPISODES_FILE))?;
            let logs = match seed {
                Some(s) => harness::logs_for_seed(&logs, s),
                None => logs,
            };
            if !harness::emit_plots(&logs, &out, window)? {
                eprintln!("warning: no episodes logged, nothing plotted");
            }
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
