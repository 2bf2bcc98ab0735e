//! Command implementations behind the `abd` binary.
//!
//! Every command writes CSV into its output directory. Apart from wall-clock
//! columns of `bench-power-iteration`, outputs are a pure function of
//! `(config, variant, seed)`.

pub mod bench;
pub mod check;
pub mod diagnose;
pub mod error;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use abd_core::network::{Config, Variant};
use clap::{Parser, Subcommand};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "abd", version, about = "Attentive and diverse re-identification features at toy scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one variant and write checkpoint, logs and test metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Comma list of pam, cam, of, ow, triplet; `none` for the baseline.
        #[arg(long, default_value = "pam,cam,of,ow,triplet")]
        variant: String,
    },
    /// Train every ablation row for every seed and tabulate test metrics.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Restricts the grid; `;`-separated variant lists, e.g. `none;pam,cam`.
        #[arg(long)]
        variants: Option<String>,
    },
    /// Channel correlation and conditioning of a checkpoint on the test split.
    Diagnose {
        /// Checkpoint directory; a fresh initialization when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config for a fresh initialization; ignored with `--checkpoint`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed of the toy dataset (and of a fresh initialization).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the variant recorded next to the checkpoint, else all flags.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient checks and oracle comparisons; exits 1 if any fails.
    Check {
        #[arg(long)]
        out: PathBuf,
        /// Multiplies every tolerance; for exercising the failure path.
        #[arg(long, default_value_t = 1.0, hide = true)]
        tolerance_scale: f64,
    },
    /// Power iteration against the Jacobi solver across sizes and iteration counts.
    BenchPowerIteration {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Reads a `key = value` config over the defaults; no path means defaults.
pub fn load_config(path: Option<&Path>) -> Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_owned(), source })?;
    Config::parse(&text).map_err(CliError::Config)
}

pub fn parse_variant(s: &str) -> Result<Variant> {
    Variant::parse(s).map_err(CliError::Config)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out, variant } => {
            let cfg = load_config(config.as_deref())?;
            let variant = parse_variant(&variant)?;
            train::cmd_train(&cfg, config.as_deref(), variant, seed, &out).map(|_| ())
        }
        Command::Ablate { config, seeds, out, variants } => {
            let cfg = load_config(config.as_deref())?;
            let variants = match variants {
                Some(list) => list.split(';').map(parse_variant).collect::<Result<Vec<_>>>()?,
                None => Variant::table(),
            };
            if seeds.is_empty() || variants.is_empty() {
                return Err(CliError::Usage("ablate needs at least one seed and one variant".into()));
            }
            train::cmd_ablate(&cfg, &variants, &seeds, &out).map(|_| ())
        }
        Command::Diagnose { checkpoint, config, seed, variant, out } => {
            let variant = variant.as_deref().map(parse_variant).transpose()?;
            let source = match checkpoint {
                Some(dir) => diagnose::Source::Checkpoint(dir),
                None => diagnose::Source::Fresh(Box::new(load_config(config.as_deref())?)),
            };
            diagnose::cmd_diagnose(source, seed, variant, &out).map(|_| ())
        }
        Command::Check { out, tolerance_scale } => {
            let rows = check::cmd_check(&out, tolerance_scale)?;
            let failed: Vec<String> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::ChecksFailed(failed))
            }
        }
        Command::BenchPowerIteration { seed, out } => bench::cmd_bench(seed, &out).map(|_| ()),
    }
}

pub(crate) fn csv_writer(dir: &Path, file: &str) -> Result<csv::Writer<fs::File>> {
    fs::create_dir_all(dir)?;
    Ok(csv::Writer::from_path(dir.join(file))?)
}

/// Shortest round-trip decimal form, so CSV bytes are stable across runs.
pub(crate) fn num(x: f64) -> String {
    format!("{x}")
}
