//! `hypreg`: generate taxonomies, embed them, fit regressors onto the
//! embedding and run the taxonomy-expansion and classification protocols.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{apply_seed, parse_config, preset, validate_config, Command, RunConfig, PRESETS};

#[derive(Parser)]
#[command(name = "hypreg", version, about = "Manifold-valued regression onto hyperbolic space")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON run configuration; its blocks override the preset or defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every RNG seed of the selected command's block.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Named base configuration (synthetic-small).
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Random tree, adjacency-PCA features and split manifest.
    Synth,
    /// Train a hyperbolic embedding of an edge list.
    Embed,
    /// Fit hsp, krls, nng or nne from features to embeddings.
    Fit,
    /// Predict embeddings for feature rows with a fitted model.
    Predict,
    /// mAP and mean rank of an embedding or of predicted points.
    Evaluate,
    /// Full taxonomy-expansion protocol over test sizes and repetitions.
    ExpansionExperiment,
    /// Synthetic hierarchical classification through an augmented taxonomy.
    ClassifyExperiment,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synth => Command::Synth,
            Cmd::Embed => Command::Embed,
            Cmd::Fit => Command::Fit,
            Cmd::Predict => Command::Predict,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::ExpansionExperiment => Command::ExpansionExperiment,
            Cmd::ClassifyExperiment => Command::ClassifyExperiment,
        }
    }
}

fn config_error(lines: impl IntoIterator<Item = String>) -> ExitCode {
    for l in lines {
        eprintln!("config error: {l}");
    }
    ExitCode::from(2)
}

fn load(cli: &Cli, command: Command) -> Result<RunConfig, ExitCode> {
    let base = match &cli.preset {
        None => RunConfig::default(),
        Some(name) => preset(name).ok_or_else(|| {
            config_error([format!("--preset: unknown preset '{name}' (available: {})", PRESETS.join(", "))])
        })?,
    };
    let mut cfg = match &cli.config {
        None => base,
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_error([format!("--config: cannot read {}: {e}", path.display())]))?;
            parse_config(&text, &base).map_err(|d| config_error([d.to_string()]))?
        }
    };
    if let Some(seed) = cli.seed {
        apply_seed(&mut cfg, command, seed);
    }
    if cli.threads == Some(0) {
        return Err(config_error(["--threads: must be at least 1".to_string()]));
    }
    let diags = validate_config(&cfg, command);
    if !diags.is_empty() {
        return Err(config_error(diags.iter().map(ToString::to_string)));
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HYPREG_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let command = Command::from(cli.command);
    let cfg = match load(&cli, command) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(command, &cfg, &cli.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e:#}", command.block());
            ExitCode::from(1)
        }
    }
}
