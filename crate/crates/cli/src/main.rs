mod config;
mod error;
mod estimate;
mod report;
mod simulate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drmiss::{EstimatorKind, Misspecification};

use crate::config::{parse_config, Overrides};
use crate::error::CliError;
use crate::estimate::EstimateSettings;
use crate::simulate::{ReplicateSidecar, SimulateSettings};

/// Environment variable holding the seed used when none is given.
const SEED_ENV: &str = "DRMISS_SEED";
const FALLBACK_SEED: u64 = 20_240_501;
const DEFAULT_ESTIMATORS: &str = "dr,naive,cc,ipcw,mcdlm";

#[derive(Debug, Parser)]
#[command(name = "drmiss", version, about = "Doubly robust ATT estimation with a confounder missing at random")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the ATT from a `y,a,c,l,r` CSV.
    Estimate(EstimateArgs),
    /// Run Monte Carlo scenarios from a TOML config.
    Simulate(SimulateArgs),
    /// Render summary CSVs as text tables and optional SVG box plots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Complete-confounder version of the input, used by the `full` estimator.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Comma-separated subset of dr, naive, cc, ipcw, mcdlm, full.
    #[arg(long)]
    estimators: Option<String>,
    /// Nonparametric bootstrap replicates (at least 50).
    #[arg(long)]
    bootstrap_b: Option<usize>,
    /// Skip the sandwich standard error of the DR estimate.
    #[arg(long)]
    no_sandwich: bool,
    /// Comma-separated misspecification switches: f_star, p_star, pi_star.
    #[arg(long)]
    misspec: Option<String>,
    /// Imputations per record for MCDLM.
    #[arg(long)]
    imputations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sidecar written by `simulate --export-replicate`; supplies the seed,
    /// switches and imputation count of that replicate.
    #[arg(long)]
    seed_file: Option<PathBuf>,
    /// Value of the `label` column (defaults to the input file stem).
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    estimators: Option<String>,
    #[arg(long)]
    imputations: Option<usize>,
    #[arg(long)]
    bootstrap_b: Option<usize>,
    /// Also write replicate R's data, its complete-confounder version and a
    /// `.seed` sidecar for each scenario.
    #[arg(long, value_name = "R")]
    export_replicate: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    summary: Vec<PathBuf>,
    /// Write box plots; defaults to `boxplot.svg` next to the first summary.
    #[arg(long, value_name = "PATH")]
    svg: Option<Option<PathBuf>>,
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{s}` is not an unsigned 64-bit integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Config(format!("{SEED_ENV}: {e}"))),
    }
}

fn parse_estimators(list: &str) -> Result<Vec<EstimatorKind>, CliError> {
    EstimatorKind::parse_list(list).map_err(CliError::Config)
}

fn run_estimate(args: EstimateArgs, verbose: bool) -> Result<(), CliError> {
    let sidecar = args.seed_file.as_deref().map(ReplicateSidecar::read).transpose()?;
    let seed = match (args.seed, &sidecar) {
        (Some(s), _) => s,
        (None, Some(side)) => side.seed().map_err(CliError::Config)?,
        (None, None) => env_seed()?.unwrap_or(FALLBACK_SEED),
    };
    let misspec = match (&args.misspec, &sidecar) {
        (Some(m), _) => Misspecification::parse_list(m).map_err(CliError::Config)?,
        (None, Some(side)) => side.misspecification().map_err(CliError::Config)?,
        (None, None) => Misspecification::NONE,
    };
    let defaults = drmiss::FitRecipe::default();
    let m_imputations = args.imputations.or(sidecar.as_ref().map(|s| s.m_imputations)).unwrap_or(defaults.m_imputations);
    let bootstrap_b = args.bootstrap_b.or(sidecar.as_ref().and_then(|s| s.bootstrap_b));
    let label = args
        .label
        .clone()
        .or_else(|| args.input.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "input".into());
    let settings = EstimateSettings {
        estimators: parse_estimators(args.estimators.as_deref().unwrap_or(DEFAULT_ESTIMATORS))?,
        input: args.input,
        oracle: args.oracle,
        misspec,
        m_imputations,
        bootstrap_b,
        sandwich: !args.no_sandwich,
        seed,
        label,
        out: args.out,
        verbose,
    };
    let path = estimate::run(&settings)?;
    if verbose {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn run_simulate(args: SimulateArgs, verbose: bool) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| CliError::io(&args.config, e))?;
    let overrides = Overrides {
        n: args.n,
        replicates: args.replicates,
        master_seed: args.seed,
        estimators: args.estimators.as_deref().map(parse_estimators).transpose()?,
        m_imputations: args.imputations,
        bootstrap_b: args.bootstrap_b,
        default_seed: env_seed()?,
    };
    let scenarios = parse_config(&text, &overrides).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", args.config.display())),
        other => other,
    })?;
    let settings = SimulateSettings { scenarios, out: args.out, export_replicate: args.export_replicate, verbose };
    for path in simulate::run(&settings)? {
        if verbose {
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for path in &args.summary {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        rows.extend(report::read_summary(path, &text)?);
    }
    let first = &args.summary[0];
    let panels = report::panels(rows).map_err(|message| CliError::Parse { path: first.clone(), message })?;
    print!("{}", report::render_text(&panels));
    if let Some(svg_path) = args.svg {
        let svg_path = svg_path.unwrap_or_else(|| first.parent().unwrap_or(Path::new(".")).join("boxplot.svg"));
        let svg = report::render_svg(&panels).map_err(|message| CliError::Parse { path: first.clone(), message })?;
        std::fs::write(&svg_path, svg).map_err(|e| CliError::io(&svg_path, e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Estimate(args) => run_estimate(args, cli.verbose),
        Command::Simulate(args) => run_simulate(args, cli.verbose),
        Command::Report(args) => run_report(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("drmiss: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
