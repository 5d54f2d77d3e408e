//! Command-line front end: cohort generation, experiments, ablations,
//! reports and Bayes probes. Every run writes under
//! `<out>/<command>-<run id>/`, where the run id hashes the configuration
//! together with the cohort.

mod commands;
mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::aggregation::AggregatorKind;
use crate::error::{Error, ErrorCategory, Result};
use crate::fusion::{BackboneKind, Strategy};
use crate::io::MatrixFormat;

pub use commands::{cmd_ablate, cmd_bayes, cmd_experiment, cmd_generate, ConfigFile};
pub use report::{cmd_report, render_markdown, render_tsv, write_run_outputs};

#[derive(Debug, Parser)]
#[command(
    name = "m2fusion",
    version,
    about = "Multi-level pathology/radiology fusion for MSI prediction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort (manifest plus one file per bag and block).
    Generate(GenerateArgs),
    /// Cross-validate the requested strategies.
    Experiment(ExperimentArgs),
    /// Sweep aggregators and backbones for feature-level fusion.
    Ablate(AblateArgs),
    /// Render tables and plots for a finished run.
    Report(ReportArgs),
    /// Check chain-rule identities and fusion-benefit claims on joint tables.
    Bayes(BayesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    PaperShape,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Existing directory that receives the cohort.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "csv")]
    pub format: MatrixFormat,
    /// JSON file whose `generator` section replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Master seed; per-fold seeds are derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub k: Option<usize>,
    /// Fold workers.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Cohort directory written by `generate`; a preset cohort is generated otherwise.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// JSON file with optional `generator`, `experiment` and `ablation`
    /// sections; a present section overrides the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `all` or a comma-separated list of strategy names.
    #[arg(long, default_value = "all")]
    pub strategies: String,
    /// Backbone of every fusion strategy.
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "max,avg,conv")]
    pub aggregators: Vec<AggregatorKind>,
    #[arg(long, value_delimiter = ',', default_value = "transformer,mlp")]
    pub backbones: Vec<BackboneKind>,
    /// Train the radiology path from scratch instead of using the frozen guide.
    #[arg(long)]
    pub unguided: bool,
    /// Add a conv row whose kernel is frozen to the identity (equals the max row).
    #[arg(long)]
    pub freeze_conv_identity: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory holding `results.json` and `scores.csv`.
    pub run_dir: PathBuf,
    /// Where to write the report; defaults to `<run_dir>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BayesArgs {
    /// Per-patient scores of an experiment run; the empirical correctness
    /// table is checked instead of random tables.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    /// Dirichlet concentration of the random tables.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decision threshold on the MSI probability.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

/// Runs one command and returns the directory it wrote.
pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Experiment(a) => cmd_experiment(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Bayes(a) => cmd_bayes(&a),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Leakage => 4,
        ErrorCategory::Other => 1,
    }
}

fn parse_strategies(list: &str) -> Result<Vec<Strategy>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(Strategy::ALL.to_vec());
    }
    let out = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Strategy>>>()?;
    if out.is_empty() {
        return Err(Error::Config("empty strategy list".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_lists() {
        assert_eq!(parse_strategies("all").unwrap().len(), 6);
        assert_eq!(
            parse_strategies("m2fusion,decision").unwrap(),
            vec![Strategy::M2fusion, Strategy::Decision]
        );
        assert!(parse_strategies("late").is_err());
        assert!(parse_strategies(",").is_err());
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "m2fusion",
            "ablate",
            "--aggregators",
            "max,conv",
            "--backbones",
            "mlp",
            "--unguided",
        ])
        .unwrap();
        match cli.command {
            Command::Ablate(a) => {
                assert_eq!(a.aggregators, vec![AggregatorKind::Max, AggregatorKind::Conv]);
                assert_eq!(a.backbones, vec![BackboneKind::Mlp]);
                assert!(a.unguided);
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn exit_codes_distinct() {
        let codes = [
            exit_code(&Error::Config("x".into())),
            exit_code(&Error::MissingFile("f".into())),
            exit_code(&Error::Leakage {
                artifact: "a".into(),
                patients: vec![],
            }),
            exit_code(&Error::Training("t".into())),
        ];
        assert_eq!(codes, [2, 3, 4, 1]);
    }
}
