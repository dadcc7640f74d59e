use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use smallarm::confidence::CRMode;
use smallarm::mc::ErrorModel;
use smallarm::moments_test::{AggregatorKind, DEFAULT_DELTA, DEFAULT_NULL_DRAWS};
use smallarm::panel::LagWindow;

mod commands;
mod manifest;

#[derive(Debug, Parser)]
#[command(name = "smallarm", version, about = "Finite-sample tests for treatment effects with very few treated units")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SMALLARM_THREADS")]
    pub threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Master seed; generated and recorded when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Re-run the command recorded in a manifest and compare output hashes.
    #[arg(long, global = true)]
    pub replay: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Count units per treatment profile (and covariate value) at a period.
    Tally(TallyCmd),
    /// Fit the control quantile function.
    Estimate(EstimateCmd),
    /// Test the null of no treatment effect.
    Test(TestCmd),
    /// Invert the test into a confidence region for treated-cell shifts.
    Cr(CrCmd),
    /// Quantile parallel-trends test under staggered adoption.
    DidTest(DidCmd),
    /// Joint test over several periods from a JSON configuration.
    Mtt(MttCmd),
    /// Monte Carlo size table.
    McSize(McSizeCmd),
    /// Monte Carlo power curves.
    McPower(McPowerCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Tally(_) => "tally",
            Self::Estimate(_) => "estimate",
            Self::Test(_) => "test",
            Self::Cr(_) => "cr",
            Self::DidTest(_) => "did-test",
            Self::Mtt(_) => "mtt",
            Self::McSize(_) => "mc-size",
            Self::McPower(_) => "mc-power",
        }
    }

    pub fn input(&self) -> Option<&PathBuf> {
        match self {
            Self::Tally(c) => Some(&c.input.input),
            Self::Estimate(c) => Some(&c.input.input),
            Self::Test(c) => Some(&c.input.input),
            Self::Cr(c) => Some(&c.input.input),
            Self::DidTest(c) => Some(&c.input.input),
            Self::Mtt(c) => Some(&c.input.input),
            Self::McSize(_) | Self::McPower(_) => None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// Long-format panel CSV.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "unit")]
    pub unit_col: String,
    #[arg(long, default_value = "time")]
    pub time_col: String,
    #[arg(long, default_value = "outcome")]
    pub outcome_col: String,
    #[arg(long, default_value = "treatment")]
    pub treat_col: String,
    #[arg(long, value_delimiter = ',')]
    pub covariate_cols: Vec<String>,
    /// Treat the treatment column as a raw series; D_t = 1 when it rises by more than this.
    #[arg(long)]
    pub binarize_cutoff: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CellArgs {
    /// Period label.
    #[arg(long)]
    pub t: i64,
    /// Profile window: `full` or a number of lags.
    #[arg(long, default_value = "full")]
    pub lags: LagWindow,
    /// Split cells by covariate value at `t`.
    #[arg(long)]
    pub by_covariates: bool,
    /// Covariate cell to analyse, values joined by `;` (implies --by-covariates).
    #[arg(long)]
    pub cell: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    /// JSON sieve specification for the control fit (default: intercept only).
    #[arg(long)]
    pub sieve: Option<PathBuf>,
    /// Linear quantile fit in this many lags instead of a sieve.
    #[arg(long)]
    pub ar_lags: Option<usize>,
    /// JSON instrument basis (default: constant).
    #[arg(long)]
    pub basis: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub restarts: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub xtol: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TestArgs {
    #[arg(long)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = DEFAULT_NULL_DRAWS)]
    pub draws: usize,
    #[arg(long, default_value = "sum")]
    pub aggregator: AggregatorKind,
    /// Per-cell aggregator weights, control first when included.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    #[arg(long)]
    pub include_control: bool,
    /// Treated profiles, e.g. 0011,0001 (default: every non-control cell).
    #[arg(long, value_delimiter = ',')]
    pub treated_profiles: Vec<String>,
    /// Always simulate, even when the exact binomial law applies.
    #[arg(long)]
    pub no_exact: bool,
    /// Write the simulated null draws to null_draws.csv.
    #[arg(long)]
    pub dump_null: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TallyCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub cell: CellArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub cell: CellArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub tau: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TestCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub cell: CellArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub test: TestArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CrCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub cell: CellArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub test: TestArgs,
    #[arg(long, default_value = "scalar")]
    pub mode: CRMode,
    /// `auto` or `lo:hi:step`.
    #[arg(long, default_value = "auto", conflicts_with = "grid_file", allow_hyphen_values = true)]
    pub grid: String,
    /// Candidates, one per line, coordinates separated by commas.
    #[arg(long)]
    pub grid_file: Option<PathBuf>,
    /// Largest joint grid evaluated.
    #[arg(long, default_value_t = smallarm::confidence::DEFAULT_GRID_CAP)]
    pub cap: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DidCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub t: i64,
    /// First-treatment periods of the cohorts to test.
    #[arg(long, value_delimiter = ',', required = true)]
    pub cohorts: Vec<i64>,
    #[arg(long)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = DEFAULT_NULL_DRAWS)]
    pub draws: usize,
    #[arg(long, default_value = "sum")]
    pub aggregator: AggregatorKind,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MttCmd {
    #[command(flatten)]
    pub input: InputArgs,
    /// JSON multi-time configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub restarts: usize,
}

fn parse_cell(s: &str) -> Result<(usize, usize), String> {
    let mut n = None;
    let mut n1 = None;
    for part in s.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| format!("expected n=..,N1=.., got {s:?}"))?;
        let v: usize = v.trim().parse().map_err(|_| format!("bad count {v:?}"))?;
        match k.trim() {
            "n" => n = Some(v),
            "N1" | "n1" => n1 = Some(v),
            other => return Err(format!("unknown key {other:?}")),
        }
    }
    match (n, n1) {
        (Some(n), Some(n1)) => Ok((n, n1)),
        _ => Err(format!("cell {s:?} needs both n and N1")),
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct McSizeCmd {
    #[arg(long, value_delimiter = ',', default_value = "i,ii,iii,iv")]
    pub models: Vec<ErrorModel>,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1")]
    pub levels: Vec<f64>,
    /// Design cell `n=200,N1=10`; repeat for several (default: the full grid).
    #[arg(long = "cells", value_parser = parse_cell)]
    pub cells: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 2000)]
    pub replications: usize,
    /// 10000 replications.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long, default_value_t = DEFAULT_NULL_DRAWS)]
    pub draws: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct McPowerCmd {
    #[arg(long, value_delimiter = ',', default_value = "i,ii,iii,iv")]
    pub models: Vec<ErrorModel>,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long = "N1", alias = "n1", default_value_t = 10.0)]
    pub n1: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// θ_1 grid `lo:hi:step`.
    #[arg(long, default_value = "0:5.4:0.2", allow_hyphen_values = true)]
    pub thetas: String,
    #[arg(long, default_value_t = 2000)]
    pub replications: usize,
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long, default_value_t = DEFAULT_NULL_DRAWS)]
    pub draws: usize,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if cli.command.is_none() && cli.replay.is_none() {
        eprintln!("error: a subcommand is required\n\n{}", <Cli as clap::CommandFactory>::command().render_help());
        return ExitCode::from(2);
    }
    match commands::run(cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
