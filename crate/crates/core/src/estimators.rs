//! Estimators of `Psi = E[Y0 | A = 1]` and the effect of treatment on the
//! treated, `theta - Psi`.
//!
//! The doubly robust estimator solves the empirical mean of the observed-data
//! influence function, which is linear in `Psi`, so it has a closed form. The
//! comparison estimators are inverse-odds-weighted plug-ins on different
//! subsets or reweightings of the data.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{DataError, Dataset, ObservedRecord};
use crate::glm::{fit_logistic, Column, Design, DesignMatrix, GlmError, WEIGHT_FLOOR};
use crate::numeric::{compensated_sum, CompensatedSum};
use crate::nuisance::{check_arms, fit_nuisances, fit_stacked_outcome, impute_confounder, CondTerms, FitRecipe, Imputations, Nuisance, NuisanceFits};

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("{block} model: {source}")]
    Glm { block: &'static str, source: GlmError },
    #[error("positivity violation: {0}")]
    Positivity(String),
    #[error("no treated/untreated records in {context} (arm a = {arm} is empty)")]
    EmptyArm { arm: u8, context: &'static str },
    #[error("no complete cases")]
    NoCompleteCases,
    #[error("numeric overflow: exponent {predictor} too large")]
    Overflow { predictor: f64 },
    #[error("full-data estimator needs every confounder observed (record {index} is missing)")]
    OracleDataRequired { index: usize },
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular information in the {0} block")]
    SingularInformation(String),
    #[error("bootstrap degenerate: {dropped} of {total} replicates failed")]
    DegenerateBootstrap { dropped: usize, total: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

impl EstimationError {
    /// Separation in a probability model used as a weight means fitted
    /// probabilities of 0 or 1, so it is reported as a positivity violation.
    pub fn from_glm(block: &'static str, source: GlmError) -> Self {
        let weights = matches!(block, "missingness" | "propensity" | "naive propensity");
        match source {
            GlmError::PositivityViolation { .. } => EstimationError::Positivity(format!("{block} model: {source}")),
            GlmError::Separation { .. } if weights => EstimationError::Positivity(format!("{block} model: {source}")),
            source => EstimationError::Glm { block, source },
        }
    }

    pub fn is_positivity(&self) -> bool {
        matches!(self, EstimationError::Positivity(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    Dr,
    Naive,
    Cc,
    Ipcw,
    Mcdlm,
    Full,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] =
        [EstimatorKind::Dr, EstimatorKind::Naive, EstimatorKind::Cc, EstimatorKind::Ipcw, EstimatorKind::Mcdlm, EstimatorKind::Full];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Dr => "DR",
            EstimatorKind::Naive => "Naive",
            EstimatorKind::Cc => "CC",
            EstimatorKind::Ipcw => "IPCW",
            EstimatorKind::Mcdlm => "MCDLM",
            EstimatorKind::Full => "Full",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<EstimatorKind>, String> {
        let mut out: Vec<EstimatorKind> = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let k: EstimatorKind = tok.parse()?;
            if !out.contains(&k) {
                out.push(k);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dr" => Ok(EstimatorKind::Dr),
            "naive" => Ok(EstimatorKind::Naive),
            "cc" => Ok(EstimatorKind::Cc),
            "ipcw" => Ok(EstimatorKind::Ipcw),
            "mcdlm" => Ok(EstimatorKind::Mcdlm),
            "full" | "aipw" => Ok(EstimatorKind::Full),
            other => Err(format!("unknown estimator `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub psi_hat: f64,
    pub theta_hat: f64,
    pub att_hat: f64,
    pub variance: Option<f64>,
    pub n_used: usize,
    pub diagnostics: Vec<String>,
}

impl EstimateReport {
    pub fn new(estimator: EstimatorKind, psi_hat: f64, theta_hat: f64, n_used: usize) -> Self {
        Self { estimator, psi_hat, theta_hat, att_hat: theta_hat - psi_hat, variance: None, n_used, diagnostics: Vec::new() }
    }

    pub fn se(&self) -> Option<f64> {
        self.variance.map(f64::sqrt)
    }
}

/// Mean outcome among the treated.
pub fn treated_mean<'a>(records: impl IntoIterator<Item = &'a ObservedRecord>) -> Result<f64, EstimationError> {
    let mut sum = CompensatedSum::new();
    let mut n = 0usize;
    for r in records.into_iter().filter(|r| r.treated()) {
        sum.add(r.y);
        n += 1;
    }
    if n == 0 {
        return Err(EstimationError::EmptyArm { arm: 1, context: "treated mean" });
    }
    Ok(sum.value() / n as f64)
}

/// Full-data efficient influence function with the propensity given as an odds.
pub fn iota_full_odds(y: f64, a: u8, odds: f64, mu0: f64, pr_a1: f64, psi: f64) -> f64 {
    if a == 0 {
        odds * (y - mu0) / pr_a1
    } else {
        (mu0 - psi) / pr_a1
    }
}

/// Full-data efficient influence function at propensity `p`.
pub fn iota_full(y: f64, a: u8, p: f64, mu0: f64, pr_a1: f64, psi: f64) -> f64 {
    iota_full_odds(y, a, p / (1.0 - p), mu0, pr_a1, psi)
}

/// `E[iota_full | Y, A, C]` expressed through the conditional-expectation terms.
pub fn cond_expectation_full(y: f64, a: u8, terms: &CondTerms, pr_a1: f64, psi: f64) -> f64 {
    if a == 0 {
        (y * terms.e_odds - terms.zeta) / pr_a1
    } else {
        (terms.v4_mean - psi) / pr_a1
    }
}

/// Per-record nuisance values the observed-data influence function needs.
#[derive(Debug, Clone)]
pub struct InfluenceContext {
    pub pi_hat: Vec<f64>,
    /// Propensity odds and untreated outcome mean at the observed confounder
    /// (`None` where it is missing).
    pub odds_hat: Vec<Option<f64>>,
    pub mu_y0: Vec<Option<f64>>,
    pub terms: Vec<CondTerms>,
    pub pr_a1: f64,
}

impl InfluenceContext {
    pub fn new<N: Nuisance>(dataset: &Dataset, nuisance: &N) -> Result<Self, EstimationError> {
        let n = dataset.n();
        let mut pi_hat = Vec::with_capacity(n);
        let mut odds_hat = Vec::with_capacity(n);
        let mut mu_y0 = Vec::with_capacity(n);
        let mut terms = Vec::with_capacity(n);
        for (i, rec) in dataset.iter().enumerate() {
            let pi = nuisance.pi(rec);
            if rec.is_complete() && (pi.is_nan() || pi < WEIGHT_FLOOR) {
                return Err(EstimationError::Positivity(format!(
                    "observation probability {pi:.3e} below {WEIGHT_FLOOR:.0e} at record {i}"
                )));
            }
            pi_hat.push(pi);
            match rec.l {
                Some(l) => {
                    odds_hat.push(Some(nuisance.odds(l, rec.c)));
                    mu_y0.push(Some(nuisance.outcome_mean0(l, rec.c)));
                }
                None => {
                    odds_hat.push(None);
                    mu_y0.push(None);
                }
            }
            terms.push(nuisance.cond_terms(rec)?);
        }
        let pr_a1 = nuisance.pr_a1();
        if !(pr_a1 > 0.0 && pr_a1 < 1.0) {
            return Err(EstimationError::InvalidArgument(format!("pr(A = 1) = {pr_a1} outside (0, 1)")));
        }
        Ok(Self { pi_hat, odds_hat, mu_y0, terms, pr_a1 })
    }

    /// Observed-data influence function of record `i` at `psi`.
    pub fn iota_miss(&self, i: usize, rec: &ObservedRecord, psi: f64) -> f64 {
        let projected = cond_expectation_full(rec.y, rec.a, &self.terms[i], self.pr_a1, psi);
        match (rec.r, self.odds_hat[i], self.mu_y0[i]) {
            (1, Some(odds), Some(mu0)) => {
                let w = 1.0 / self.pi_hat[i];
                w * iota_full_odds(rec.y, rec.a, odds, mu0, self.pr_a1, psi) - (w - 1.0) * projected
            }
            _ => projected,
        }
    }
}

/// Observed-data influence function of one record under `nuisance`.
pub fn iota_miss<N: Nuisance>(rec: &ObservedRecord, nuisance: &N, psi: f64) -> Result<f64, EstimationError> {
    let ds = Dataset::new(vec![*rec]);
    let ctx = InfluenceContext::new(&ds, nuisance)?;
    Ok(ctx.iota_miss(0, rec, psi))
}

/// Root of the empirical mean of the observed-data influence function.
/// The function has slope `-A / pr(A = 1)` in `Psi`, so the root is a ratio of sums.
pub fn solve_psi(dataset: &Dataset, ctx: &InfluenceContext) -> f64 {
    let num = compensated_sum(dataset.iter().enumerate().map(|(i, r)| ctx.iota_miss(i, r, 0.0)));
    let den = compensated_sum(dataset.iter().map(|r| r.a_f64())) / ctx.pr_a1;
    num / den
}

/// Doubly robust estimator.
pub fn estimate_dr<N: Nuisance>(dataset: &Dataset, nuisance: &N) -> Result<EstimateReport, EstimationError> {
    check_arms(dataset.iter(), "full sample")?;
    let ctx = InfluenceContext::new(dataset, nuisance)?;
    let psi = solve_psi(dataset, &ctx);
    Ok(EstimateReport::new(EstimatorKind::Dr, psi, treated_mean(dataset)?, dataset.n()))
}

/// Full-data augmented IPW solution; requires every confounder observed.
pub fn aipw_full<N: Nuisance>(dataset: &Dataset, nuisance: &N) -> Result<f64, EstimationError> {
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    for (i, rec) in dataset.iter().enumerate() {
        let l = rec.l.ok_or(EstimationError::OracleDataRequired { index: i })?;
        let mu0 = nuisance.outcome_mean0(l, rec.c);
        if rec.treated() {
            num.add(mu0);
            den.add(1.0);
        } else {
            num.add(nuisance.odds(l, rec.c) * (rec.y - mu0));
        }
    }
    Ok(num.value() / den.value())
}

/// Weighted inverse-odds plug-in `sum w (1 - A) odds Y / sum w A`.
fn odds_weighted_plugin<'a>(rows: impl Iterator<Item = (&'a ObservedRecord, f64, f64)>) -> Result<f64, EstimationError> {
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    for (rec, weight, odds) in rows {
        if rec.treated() {
            den.add(weight);
        } else {
            num.add(weight * odds * rec.y);
        }
    }
    if den.value() <= 0.0 {
        return Err(EstimationError::EmptyArm { arm: 1, context: "plug-in" });
    }
    Ok(num.value() / den.value())
}

/// Complete cases weighted by `1 / pi`, odds from the fitted propensity.
pub fn estimate_ipcw<N: Nuisance>(dataset: &Dataset, nuisance: &N) -> Result<EstimateReport, EstimationError> {
    check_arms(dataset.iter().filter(|r| r.is_complete()), "complete cases")?;
    let mut rows = Vec::with_capacity(dataset.n_complete());
    for (i, rec) in dataset.iter().enumerate() {
        let Some(l) = rec.l else { continue };
        let pi = nuisance.pi(rec);
        if pi.is_nan() || pi < WEIGHT_FLOOR {
            return Err(EstimationError::Positivity(format!("observation probability {pi:.3e} at record {i}")));
        }
        rows.push((rec, 1.0 / pi, nuisance.odds(l, rec.c)));
    }
    let psi = odds_weighted_plugin(rows.into_iter())?;
    Ok(EstimateReport::new(EstimatorKind::Ipcw, psi, treated_mean(dataset)?, dataset.n_complete()))
}

/// Unweighted plug-in on complete cases only.
pub fn estimate_cc<N: Nuisance>(dataset: &Dataset, nuisance: &N) -> Result<EstimateReport, EstimationError> {
    let cc: Vec<&ObservedRecord> = dataset.iter().filter(|r| r.is_complete()).collect();
    if cc.is_empty() {
        return Err(EstimationError::NoCompleteCases);
    }
    check_arms(cc.iter().copied(), "complete cases")?;
    let psi = odds_weighted_plugin(cc.iter().map(|r| (*r, 1.0, nuisance.odds(r.l.expect("complete"), r.c))))?;
    Ok(EstimateReport::new(EstimatorKind::Cc, psi, treated_mean(cc.iter().copied())?, cc.len()))
}

/// Plug-in with odds from a logistic regression of `A` on `C` alone.
pub fn estimate_naive(dataset: &Dataset) -> Result<EstimateReport, EstimationError> {
    check_arms(dataset.iter(), "full sample")?;
    let design = Design::new(vec![Column::C]);
    let mut x = DesignMatrix::with_columns(design.width());
    let mut a = Vec::with_capacity(dataset.n());
    for rec in dataset {
        x.push_row(&design.row(&rec.with_l(f64::NAN)));
        a.push(rec.a_f64());
    }
    let fit = fit_logistic(&x, &a, None).map_err(|e| EstimationError::from_glm("naive propensity", e))?;
    let odds = |c: f64| (fit.coefficients[0] + fit.coefficients[1] * c).exp();
    let psi = odds_weighted_plugin(dataset.iter().map(|r| (r, 1.0, odds(r.c))))?;
    let mut report = EstimateReport::new(EstimatorKind::Naive, psi, treated_mean(dataset)?, dataset.n());
    if !fit.converged {
        report.diagnostics.push("naive propensity fit did not converge".into());
    }
    Ok(report)
}

/// Monte Carlo direct likelihood maximization: impute each missing confounder
/// `m` times from the fitted confounder model, refit the outcome model on the
/// stack and evaluate the inverse-odds plug-in over the stacked data.
pub fn estimate_mcdlm(dataset: &Dataset, fits: &NuisanceFits, m_imputations: usize, seed: u64) -> Result<EstimateReport, EstimationError> {
    if m_imputations == 0 {
        return Err(EstimationError::InvalidArgument("at least one imputation is required".into()));
    }
    check_arms(dataset.iter(), "full sample")?;
    let imputations = Imputations::draw(dataset, m_imputations, seed);
    let (outcome, _) = fit_stacked_outcome(dataset, &fits.confounder, fits.sigma_l_sq, &fits.recipe.outcome, &imputations)?;
    let sigma_l = fits.sigma_l_sq.sqrt();

    let copies = if imputations.missing.is_empty() { 1.0 } else { imputations.m as f64 };
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    for rec in dataset {
        if rec.treated() {
            den.add(copies);
        } else if let Some(l) = rec.l {
            num.add(copies * fits.odds(l, rec.c) * rec.y);
        }
    }
    for k in 0..imputations.m {
        for (&i, &z) in imputations.missing.iter().zip(imputations.draws(k)) {
            let rec = &dataset.records()[i];
            if !rec.treated() {
                let l = impute_confounder(&fits.confounder, sigma_l, rec, z);
                num.add(fits.odds(l, rec.c) * rec.y);
            }
        }
    }
    let mut report = EstimateReport::new(EstimatorKind::Mcdlm, num.value() / den.value(), treated_mean(dataset)?, dataset.n());
    report.diagnostics.push(format!("stacked outcome coefficients {:?}", outcome.coefficients));
    Ok(report)
}

/// Benchmark on data with every confounder observed: augmented IPW with an
/// unweighted propensity fit and least-squares outcome model.
pub fn estimate_fulldata(full: &Dataset, recipe: &FitRecipe) -> Result<EstimateReport, EstimationError> {
    if let Some(index) = full.iter().position(|r| !r.is_complete()) {
        return Err(EstimationError::OracleDataRequired { index });
    }
    let fits = fit_nuisances(full, recipe)?;
    let psi = aipw_full(full, &fits)?;
    Ok(EstimateReport::new(EstimatorKind::Full, psi, treated_mean(full)?, full.n()))
}

/// Inputs shared by every estimator in one analysis.
#[derive(Debug, Clone, Copy)]
pub struct EstimationInputs<'a> {
    pub dataset: &'a Dataset,
    pub fits: &'a NuisanceFits,
    /// Same subjects with every confounder observed, for the benchmark.
    pub oracle: Option<&'a Dataset>,
    pub m_imputations: usize,
    pub seed: u64,
}

/// Run one estimator. `Full` uses the oracle data when given, otherwise the
/// dataset itself (which then must have no missing confounders).
pub fn run_estimator(kind: EstimatorKind, inputs: &EstimationInputs<'_>) -> Result<EstimateReport, EstimationError> {
    match kind {
        EstimatorKind::Dr => estimate_dr(inputs.dataset, inputs.fits),
        EstimatorKind::Ipcw => estimate_ipcw(inputs.dataset, inputs.fits),
        EstimatorKind::Cc => estimate_cc(inputs.dataset, inputs.fits),
        EstimatorKind::Naive => estimate_naive(inputs.dataset),
        EstimatorKind::Mcdlm => estimate_mcdlm(inputs.dataset, inputs.fits, inputs.m_imputations, inputs.seed),
        EstimatorKind::Full => estimate_fulldata(inputs.oracle.unwrap_or(inputs.dataset), &inputs.fits.recipe),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iota_full_hand_values() {
        assert_eq!(iota_full(3.0, 1, 0.3, 0.7, 0.4, 0.7), 0.0);
        assert_eq!(iota_full(0.7, 0, 0.3, 0.7, 0.4, 0.1), 0.0);
        assert_eq!(iota_full(1.0, 0, 0.5, 0.0, 0.5, 0.0), 2.0);
    }

    #[test]
    fn estimator_names_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
        }
        assert_eq!(EstimatorKind::parse_list("dr, ipcw,dr").unwrap(), vec![EstimatorKind::Dr, EstimatorKind::Ipcw]);
        assert!(EstimatorKind::parse_list("dr,xx").is_err());
    }

    #[test]
    fn report_arithmetic() {
        let r = EstimateReport::new(EstimatorKind::Cc, 0.1 + 0.2, 0.7, 3);
        assert_eq!(r.att_hat, 0.7 - (0.1 + 0.2));
    }
}
