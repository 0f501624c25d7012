use std::path::{Path, PathBuf};

use drmiss::estimators::{run_estimator, EstimationInputs};
use drmiss::inference::{bootstrap, sandwich_variance, VarianceReport};
use drmiss::rng::{derive_seed, streams};
use drmiss::{fit_nuisances, Dataset, EstimateReport, EstimationError, EstimatorKind, FitRecipe, Misspecification};

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct EstimateSettings {
    pub input: PathBuf,
    /// Same subjects with every confounder observed; used by `Full`.
    pub oracle: Option<PathBuf>,
    pub estimators: Vec<EstimatorKind>,
    pub misspec: Misspecification,
    pub m_imputations: usize,
    pub bootstrap_b: Option<usize>,
    pub sandwich: bool,
    pub seed: u64,
    pub label: String,
    pub out: PathBuf,
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardErrors {
    pub sandwich: Option<f64>,
    pub bootstrap: Option<VarianceReport>,
    /// Variance failures that did not prevent the point estimate.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowFailure {
    pub message: String,
    pub positivity: bool,
}

impl From<&EstimationError> for RowFailure {
    fn from(e: &EstimationError) -> Self {
        Self { message: e.to_string(), positivity: e.is_positivity() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub estimator: EstimatorKind,
    pub outcome: Result<(EstimateReport, StandardErrors), RowFailure>,
}

pub const ESTIMATES_HEADER: [&str; 12] = [
    "label", "estimator", "status", "psi_hat", "theta_hat", "att_hat", "sandwich_se", "bootstrap_se", "ci_lower",
    "ci_upper", "n_used", "message",
];

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::read_csv_path(path).map_err(|source| CliError::Input { path: path.to_path_buf(), source })
}

/// Fit once, then run every requested estimator; failures stay per row.
pub fn estimate_all(
    settings: &EstimateSettings,
    dataset: &Dataset,
    oracle: Option<&Dataset>,
) -> Vec<EstimateRow> {
    let recipe = FitRecipe::default()
        .misspecified(settings.misspec)
        .with_imputations(settings.m_imputations)
        .with_seed(settings.seed);
    let fits = fit_nuisances(dataset, &recipe).map_err(|e| RowFailure::from(&e));
    settings
        .estimators
        .iter()
        .map(|&estimator| {
            if settings.verbose {
                eprintln!("estimating {estimator}");
            }
            let outcome = fits.as_ref().map_err(Clone::clone).and_then(|fits| {
                let inputs = EstimationInputs {
                    dataset,
                    fits,
                    oracle,
                    m_imputations: settings.m_imputations,
                    seed: settings.seed,
                };
                let report = run_estimator(estimator, &inputs).map_err(|e| RowFailure::from(&e))?;
                let ses = standard_errors(settings, estimator, dataset, oracle, fits, &recipe, report.psi_hat);
                Ok((report, ses))
            });
            EstimateRow { estimator, outcome }
        })
        .collect()
}

fn standard_errors(
    settings: &EstimateSettings,
    estimator: EstimatorKind,
    dataset: &Dataset,
    oracle: Option<&Dataset>,
    fits: &drmiss::NuisanceFits,
    recipe: &FitRecipe,
    psi_hat: f64,
) -> StandardErrors {
    let mut ses = StandardErrors { sandwich: None, bootstrap: None, notes: Vec::new() };
    if settings.sandwich && estimator == EstimatorKind::Dr {
        match sandwich_variance(dataset, fits, psi_hat) {
            Ok(v) => ses.sandwich = v.sandwich_var.map(f64::sqrt),
            Err(e) => ses.notes.push(format!("sandwich: {e}")),
        }
    }
    if let Some(b) = settings.bootstrap_b {
        let data = if estimator == EstimatorKind::Full { oracle.unwrap_or(dataset) } else { dataset };
        match bootstrap(data, estimator, recipe, b, derive_seed(settings.seed, streams::BOOTSTRAP)) {
            Ok(v) => ses.bootstrap = Some(v),
            Err(e) => ses.notes.push(format!("bootstrap: {e}")),
        }
    }
    ses
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_estimates<W: std::io::Write>(label: &str, rows: &[EstimateRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ESTIMATES_HEADER)?;
    for row in rows {
        let name = row.estimator.name();
        match &row.outcome {
            Ok((report, ses)) => {
                let boot = ses.bootstrap.as_ref();
                let ci = boot.and_then(|b| b.bootstrap_ci);
                w.write_record([
                    label.to_string(),
                    name.to_string(),
                    "ok".to_string(),
                    report.psi_hat.to_string(),
                    report.theta_hat.to_string(),
                    report.att_hat.to_string(),
                    opt(ses.sandwich),
                    opt(boot.and_then(|b| b.bootstrap_var).map(f64::sqrt)),
                    opt(ci.map(|c| c.0)),
                    opt(ci.map(|c| c.1)),
                    report.n_used.to_string(),
                    ses.notes.join("; "),
                ])?;
            }
            Err(e) => {
                let mut rec = vec![label.to_string(), name.to_string(), "failed".to_string()];
                rec.extend(std::iter::repeat_n(String::new(), 8));
                rec.push(e.message.clone());
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Error to exit with when no estimator produced an estimate.
fn all_failed(rows: &[EstimateRow]) -> Option<CliError> {
    let errors: Vec<&RowFailure> = rows.iter().filter_map(|r| r.outcome.as_ref().err()).collect();
    if errors.len() < rows.len() || errors.is_empty() {
        return None;
    }
    let summary = rows
        .iter()
        .zip(&errors)
        .map(|(r, e)| format!("{}: {}", r.estimator, e.message))
        .collect::<Vec<_>>()
        .join("; ");
    Some(if errors.iter().all(|e| e.positivity) {
        CliError::Positivity(summary)
    } else {
        CliError::Estimation(summary)
    })
}

pub fn run(settings: &EstimateSettings) -> Result<PathBuf, CliError> {
    if settings.estimators.is_empty() {
        return Err(CliError::Config("no estimators requested".into()));
    }
    if settings.m_imputations == 0 {
        return Err(CliError::Config("imputations must be at least 1".into()));
    }
    let dataset = read_dataset(&settings.input)?;
    let oracle = settings.oracle.as_deref().map(read_dataset).transpose()?;
    if let Some(o) = &oracle {
        if o.n() != dataset.n() {
            return Err(CliError::Config(format!(
                "oracle data has {} records but the input has {}",
                o.n(),
                dataset.n()
            )));
        }
    }
    let rows = estimate_all(settings, &dataset, oracle.as_ref());
    std::fs::create_dir_all(&settings.out).map_err(|e| CliError::io(&settings.out, e))?;
    let path = settings.out.join("estimates.csv");
    let mut buf = Vec::new();
    write_estimates(&settings.label, &rows, &mut buf).map_err(|e| CliError::io(&path, e.into()))?;
    std::fs::write(&path, buf).map_err(|e| CliError::io(&path, e))?;
    for row in &rows {
        if let Err(e) = &row.outcome {
            eprintln!("warning: {} failed: {}", row.estimator, e.message);
        }
    }
    match all_failed(&rows) {
        Some(err) => Err(err),
        None => Ok(path),
    }
}
