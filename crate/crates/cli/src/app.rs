//! Command-line parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use triplex_core::synth::{write_toy_dataset, SynthConfig};

use crate::config::RunConfig;
use crate::error::{exit_code, EXIT_INPUT};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(
    name = "triplex",
    version,
    about = "Predict spatial gene expression from histology features"
)]
pub struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `paths.out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select genes, normalise counts and write features.
    Prepare,
    /// Train one model on every prepared slide.
    Train,
    /// Cross-validate and write per-fold and aggregate reports.
    Cv,
    /// Predict expression for prepared slides with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Slides to predict (default: all).
        #[arg(long)]
        slide: Vec<String>,
    },
    /// Score a predictions CSV against the prepared labels.
    Eval(PredictionsArgs),
    /// Export prediction and truth heatmaps of one gene.
    Heatmap {
        #[command(flatten)]
        predictions: PredictionsArgs,
        #[arg(long)]
        gene: String,
    },
    /// Write a synthetic toy dataset with a matching config file.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PredictionsArgs {
    /// Predictions CSV written by `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Slide of the predictions (default: the file name without extension).
    #[arg(long)]
    pub slide: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub patients: usize,
    #[arg(long, default_value_t = 2)]
    pub slides_per_patient: usize,
    /// Side length of each slide's square spot grid.
    #[arg(long, default_value_t = 6)]
    pub grid: usize,
    #[arg(long, default_value_t = 16)]
    pub genes: usize,
    /// Low-count genes that gene selection should discard.
    #[arg(long, default_value_t = 4)]
    pub extra_genes: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    /// Also write one PPM image per slide.
    #[arg(long)]
    pub images: bool,
}

fn synth(args: &SynthArgs, seed: Option<u64>, out: PathBuf) -> Result<PathBuf> {
    let cfg = SynthConfig {
        patients: args.patients,
        slides_per_patient: args.slides_per_patient,
        grid: args.grid,
        genes: args.genes,
        feature_dim: args.feature_dim,
        seed: seed.unwrap_or(SynthConfig::default().seed),
        ..SynthConfig::default()
    };
    write_toy_dataset(&out, &cfg, args.extra_genes, args.images)?;
    let config = format!(
        "# Toy run over the synthetic dataset in this directory.\n\
         [paths]\nspots = \"spots.csv\"\ncounts = \"counts.csv\"\nfeatures = \"features\"\nout = \"run\"\n\n\
         [preprocess]\nm_keep = {}\n\n\
         [model.encoder]\nd = 32\nnum_heads1 = 4\nnum_heads2 = 4\nnum_heads3 = 4\n\n\
         [train]\nlr0 = 1e-3\nmax_epochs = 30\npatience = 10\n",
        args.genes
    );
    let path = out.join("triplex.toml");
    triplex_core::io::atomic_write(&path, config.as_bytes())?;
    Ok(path)
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.finish(cli.seed, cli.out.clone())?)
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    if let Command::Synth(args) = &cli.command {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("toy"));
        let path = synth(args, cli.seed, out)?;
        println!("{}", path.display());
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Prepare => println!("{}", pipeline::prepare(&cfg)?.display()),
        Command::Train => println!("{}", pipeline::train(&cfg)?.display()),
        Command::Cv => {
            let outcome = pipeline::cv(&cfg)?;
            print!("{}", outcome.report.summary());
        }
        Command::Predict { checkpoint, slide } => {
            for p in pipeline::predict(&cfg, checkpoint, slide)? {
                println!("{}", p.display());
            }
        }
        Command::Eval(a) => {
            print!(
                "{}",
                pipeline::eval(&cfg, &a.predictions, a.slide.as_deref())?.summary()
            );
        }
        Command::Heatmap { predictions, gene } => {
            let paths = pipeline::heatmap(
                &cfg,
                &predictions.predictions,
                predictions.slide.as_deref(),
                gene,
            )?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Synth(_) => unreachable!("handled above"),
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
