use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use drmiss::sim::{
    replicate_seed, run_monte_carlo, summarize, write_boxplot_csv, write_results_csv, write_summary_csv, Failure,
    ScenarioConfig,
};
use drmiss::Misspecification;

use crate::error::CliError;

/// Everything `estimate` needs to redo one simulated replicate's analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateSidecar {
    pub scenario: String,
    pub replicate: usize,
    /// Kept as text: TOML integers stop at `i64::MAX`.
    pub seed: String,
    pub misspec: Vec<String>,
    pub m_imputations: usize,
    pub bootstrap_b: Option<usize>,
    pub sandwich: bool,
}

impl ReplicateSidecar {
    pub fn new(config: &ScenarioConfig, replicate: usize) -> Self {
        Self {
            scenario: config.name.clone(),
            replicate,
            seed: replicate_seed(config.master_seed, replicate).to_string(),
            misspec: config.misspec.labels().iter().map(|s| s.to_string()).collect(),
            m_imputations: config.m_imputations,
            bootstrap_b: config.bootstrap_b,
            sandwich: config.sandwich,
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn seed(&self) -> Result<u64, String> {
        self.seed.trim().parse().map_err(|_| format!("invalid seed `{}`", self.seed))
    }

    pub fn misspecification(&self) -> Result<Misspecification, String> {
        Misspecification::parse_list(&self.misspec.join(","))
    }
}

#[derive(Debug, Clone)]
pub struct SimulateSettings {
    pub scenarios: Vec<ScenarioConfig>,
    pub out: PathBuf,
    pub export_replicate: Option<usize>,
    pub verbose: bool,
}

fn is_safe_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && !name.starts_with('.')
}

fn csv_bytes(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(|e| CliError::io(path, e.into()))?;
    Ok(buf)
}

fn write_failures_csv(scenario_failures: &[(String, Vec<Failure>)], out: &mut Vec<u8>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "replicate", "estimator", "message"])?;
    for (scenario, failures) in scenario_failures {
        for f in failures {
            w.write_record([scenario.as_str(), &f.replicate.to_string(), f.estimator.name(), &f.message])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Run every scenario, then write all artifacts from the main thread.
pub fn run(settings: &SimulateSettings) -> Result<Vec<PathBuf>, CliError> {
    for cfg in &settings.scenarios {
        if !is_safe_name(&cfg.name) {
            return Err(CliError::Config(format!(
                "scenario name `{}` must use only letters, digits, `-`, `_` and `.`",
                cfg.name
            )));
        }
        if let Some(r) = settings.export_replicate {
            if r >= cfg.replicates {
                return Err(CliError::Config(format!(
                    "scenario {}: cannot export replicate {r} of {}",
                    cfg.name, cfg.replicates
                )));
            }
        }
    }

    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut all_rows = Vec::new();
    let mut all_summaries = Vec::new();
    let mut all_failures = Vec::new();
    for cfg in &settings.scenarios {
        if settings.verbose {
            eprintln!("scenario {}: {} replicates of n = {}", cfg.name, cfg.replicates, cfg.n);
        }
        let results = run_monte_carlo(cfg).map_err(|e| CliError::Config(format!("scenario {}: {e}", cfg.name)))?;
        for w in &results.warnings {
            eprintln!("warning: scenario {}: {w}", cfg.name);
        }
        if results.rows.is_empty() {
            let first = results.failures.first().map(|f| f.message.as_str()).unwrap_or("no estimates");
            let message = format!("scenario {}: every replicate failed ({first})", cfg.name);
            return Err(if first.starts_with("positivity") { CliError::Positivity(message) } else { CliError::Estimation(message) });
        }
        let truth = results.truth_att;
        let summaries = summarize(&results, truth);
        let path = settings.out.join(format!("boxplot_{}.csv", cfg.name));
        let bytes = csv_bytes(&path, |b| write_boxplot_csv(&summaries, truth, b))?;
        files.push((path, bytes));

        if let Some(r) = settings.export_replicate {
            let stem = format!("replicate_{}_{r}", cfg.name);
            let (observed, full) = cfg.dgp.generate(cfg.n, replicate_seed(cfg.master_seed, r));
            for (suffix, data) in [("", &observed), ("_full", &full)] {
                let path = settings.out.join(format!("{stem}{suffix}.csv"));
                let mut buf = Vec::new();
                data.write_csv(&mut buf).map_err(|e| CliError::Estimation(format!("{}: {e}", path.display())))?;
                files.push((path, buf));
            }
            let sidecar = toml::to_string(&ReplicateSidecar::new(cfg, r))
                .map_err(|e| CliError::Config(format!("scenario {}: {e}", cfg.name)))?;
            files.push((settings.out.join(format!("{stem}.seed")), sidecar.into_bytes()));
        }

        all_summaries.extend(summaries.into_iter().map(|s| (truth, s)));
        all_failures.push((cfg.name.clone(), results.failures));
        all_rows.extend(results.rows);
    }

    let path = settings.out.join("results.csv");
    let bytes = csv_bytes(&path, |b| write_results_csv(&all_rows, b))?;
    files.insert(0, (path, bytes));
    let path = settings.out.join("summary.csv");
    let bytes = csv_bytes(&path, |b| write_summary_csv(&all_summaries, b))?;
    files.insert(1, (path, bytes));
    let path = settings.out.join("failures.csv");
    let bytes = csv_bytes(&path, |b| write_failures_csv(&all_failures, b))?;
    files.insert(2, (path, bytes));

    std::fs::create_dir_all(&settings.out).map_err(|e| CliError::io(&settings.out, e))?;
    for (path, bytes) in &files {
        std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
