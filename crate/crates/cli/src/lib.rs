//! Command-line driver for `synthembed`: one manifest-driven subcommand per stage.
//!
//! Exit status is 0 on success, 1 when an invariant fails (empty generation,
//! bad manifest values, failed runs) and 2 for environment trouble (missing
//! files, unreachable gateway).

pub mod commands;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use synthembed::influence::TTestKind;
use synthembed::model::Category;

pub use error::{CliError, ExitCode};
pub use manifest::{ExperimentManifest, Overrides};

#[derive(Debug, Parser)]
#[command(name = "synthembed", version, about = "Synthetic embedding data, training and influence analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every manifest-driven subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment manifest (TOML).
    #[arg(short, long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `planted` or a JSON file of scripted mock responses.
    #[arg(long)]
    pub mock: Option<String>,
    #[arg(long)]
    pub base_url: Option<String>,
    /// Worker threads for generation and grid training.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct InfluenceArgs {
    #[command(flatten)]
    pub common: Common,
    /// Use Welch's unequal-variance test instead of the pooled one.
    #[arg(long)]
    pub welch: bool,
    /// Comma-separated override of `influence_categories`.
    #[arg(long, value_delimiter = ',', value_parser = parse_category)]
    pub categories: Option<Vec<Category>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic data for every `[[generation]]` entry.
    Generate(Common),
    /// Train on the base data plus all generated and imported data.
    Train(Common),
    /// Score a checkpoint on the evaluation tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the full subset grid and estimate per-category influence.
    Influence(InfluenceArgs),
    /// Re-render influence outputs from an existing registry.
    Report(InfluenceArgs),
    /// Import a published corpus as per-category JSONL.
    Import {
        /// File or directory of JSONL; defaults to $SYNTHEMBED_PUBLISHED_DATA.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Write into this manifest's data directory.
        #[arg(short, long, conflicts_with = "out")]
        manifest: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        out: Option<PathBuf>,
    },
    /// Write an offline planted experiment into a directory.
    InitPlanted {
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_category(s: &str) -> Result<Category, String> {
    Category::parse_lenient(s).ok_or_else(|| format!("unknown category `{s}`"))
}

fn load(common: &Common, categories: Option<Vec<Category>>) -> Result<ExperimentManifest, CliError> {
    let overrides = Overrides {
        output_dir: common.output_dir.clone(),
        seed: common.seed,
        alpha: common.alpha,
        mock: common.mock.clone(),
        base_url: common.base_url.clone(),
        influence_categories: categories,
    };
    ExperimentManifest::load(&common.manifest, &overrides)
}

fn ttest(welch: bool) -> TTestKind {
    if welch {
        TTestKind::Welch
    } else {
        TTestKind::Student
    }
}

/// Runs a parsed command and returns what it prints on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Generate(c) => {
            let m = load(&c, None)?;
            let s = commands::generate(&m, c.jobs)?;
            let files: Vec<String> = s.files.iter().map(|p| p.display().to_string()).collect();
            Ok(format!("{}wrote {}\n", s.report.to_table(), files.join(", ")))
        }
        Command::Train(c) => {
            let m = load(&c, None)?;
            let s = commands::train(&m)?;
            Ok(format!(
                "trained on {} examples, loss {:.4} -> {:.4}\nwrote {}\n",
                s.examples,
                s.initial_loss,
                s.final_loss,
                s.checkpoint.display()
            ))
        }
        Command::Eval { common, checkpoint } => {
            let m = load(&common, None)?;
            let scores = commands::eval(&m, checkpoint.as_deref())?;
            Ok(scores.to_csv())
        }
        Command::Influence(a) => {
            let m = load(&a.common, a.categories)?;
            let jobs = a.common.jobs.unwrap_or(m.synth.jobs);
            let out = commands::influence(&m, jobs, ttest(a.welch))?;
            Ok(format!("{} runs\n{}", out.runs, out.table))
        }
        Command::Report(a) => {
            let m = load(&a.common, a.categories)?;
            Ok(commands::report(&m, ttest(a.welch))?.table)
        }
        Command::Import { from, manifest, out } => {
            let out_dir = match (manifest, out) {
                (Some(path), _) => ExperimentManifest::load(&path, &Overrides::default())?.data_dir(),
                (None, Some(dir)) => dir,
                (None, None) => return Err(CliError::invariant("pass --manifest or --out")),
            };
            let r = commands::import(from.as_deref(), &out_dir)?;
            let mut text = String::new();
            for (c, n) in &r.records {
                text += &format!("{c:<12} {n:>9} records, {:>9} valid\n", r.valid.get(c).copied().unwrap_or(0));
            }
            text += &format!(
                "total {} records from {} files ({} invalid, {} unknown category, {} malformed lines)\n",
                r.total_records(),
                r.files,
                r.invalid,
                r.unknown_category,
                r.malformed_lines
            );
            Ok(text)
        }
        Command::InitPlanted { dir, seed } => {
            let path = commands::init_planted(&dir, seed)?;
            Ok(format!("wrote {}\n", path.display()))
        }
    }
}
