//! Command-line front end: reads a JSON run config, runs the ablation
//! variants and writes images, masks, heatmaps, metrics and a manifest.

pub mod config;
pub mod manifest;
pub mod pgm;
pub mod run;

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use harmonize_core::sampler::Variant;
use thiserror::Error;

pub use config::{parse, prepare, Prepared, RunConfig, Violation};
pub use manifest::Manifest;
pub use run::{execute, write_outputs, Outputs};

/// Environment variable that takes precedence over `--out`.
pub const OUT_ENV: &str = "HARMONIZE_OUT";

#[derive(Debug, Clone, Parser)]
#[command(name = "harmonize", version, about = "Run the orchestration / self-attention swap ablation")]
pub struct Cli {
    /// JSON run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overridden by HARMONIZE_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = VariantArg::All)]
    pub variant: VariantArg,
    /// Number of denoising steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Check the config and exit without computing anything.
    #[arg(long)]
    pub validate_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Baseline,
    Orchestration,
    Swap,
    Ours,
    All,
}

impl VariantArg {
    pub fn variants(self) -> Vec<Variant> {
        match self {
            VariantArg::Baseline => vec![Variant::Baseline],
            VariantArg::Orchestration => vec![Variant::Orchestration],
            VariantArg::Swap => vec![Variant::Swap],
            VariantArg::Ours => vec![Variant::Ours],
            VariantArg::All => Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {}: {source}", path.display())]
    ReadConfig { path: PathBuf, source: io::Error },
    #[error("invalid config:\n{}", list(.0))]
    Invalid(Vec<Violation>),
    #[error("run failed: {0}")]
    Compute(#[from] harmonize_core::Error),
    #[error("cannot write outputs to {}: {source}", path.display())]
    Write { path: PathBuf, source: io::Error },
}

fn list(violations: &[Violation]) -> String {
    violations.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    /// 2 for anything wrong with the config, 1 for failures after it was
    /// accepted.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ReadConfig { .. } | CliError::Invalid(_) => 2,
            CliError::Compute(_) | CliError::Write { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Valid,
    Written { dir: PathBuf, files: usize, warnings: usize },
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Valid => write!(f, "config is valid"),
            Outcome::Written { dir, files, warnings } => {
                write!(f, "wrote {files} files to {} ({warnings} warnings)", dir.display())
            }
        }
    }
}

/// Reads, overrides and checks a config file.
pub fn load(cli: &Cli) -> Result<(Prepared, PathBuf), CliError> {
    let text = fs::read_to_string(&cli.config)
        .map_err(|source| CliError::ReadConfig { path: cli.config.clone(), source })?;
    let mut config = parse(&text).map_err(|v| CliError::Invalid(vec![v]))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(steps) = cli.steps {
        config.scheduler.steps = steps;
    }
    let base = cli.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let prepared = prepare(config, &base).map_err(CliError::Invalid)?;
    Ok((prepared, base))
}

/// The whole command. `env_out` is the value of [`OUT_ENV`], if set.
pub fn run(cli: &Cli, env_out: Option<PathBuf>) -> Result<Outcome, CliError> {
    let (prepared, base) = load(cli)?;
    let out = env_out.or_else(|| cli.out.clone()).or_else(|| prepared.config.output_dir.as_ref().map(|d| base.join(d)));
    if cli.validate_only {
        return Ok(Outcome::Valid);
    }
    let Some(dir) = out else {
        return Err(CliError::Invalid(vec![Violation {
            path: "output_dir".into(),
            message: format!("no output directory; pass --out, set {OUT_ENV} or set output_dir"),
        }]));
    };
    let outputs = execute(&prepared, &cli.variant.variants())?;
    for w in &outputs.manifest.warnings {
        log::warn!("{w}");
    }
    write_outputs(&dir, &outputs).map_err(|source| CliError::Write { path: dir.clone(), source })?;
    Ok(Outcome::Written {
        dir,
        files: outputs.artifacts.len() + 1,
        warnings: outputs.manifest.warnings.len(),
    })
}
