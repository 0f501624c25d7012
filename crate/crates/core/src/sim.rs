//! Simulation study: Gaussian data-generating processes with a confounder
//! missing at random, the misspecification grid, the replication loop and
//! summary statistics.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ObservedRecord};
use crate::estimators::{run_estimator, EstimationError, EstimationInputs, EstimatorKind};
use crate::inference::{bootstrap, sandwich_variance};
use crate::numeric::{expit, mean, quantile_sorted, sample_variance};
use crate::nuisance::{fit_nuisances, FitRecipe, Misspecification};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::toy::ToyLaw;

/// Parameters of the Gaussian data-generating process:
/// `C = N(0,1) + U(-1,1)`, `logit pr(A = 1 | C) = zeta0 + zeta1 C`,
/// `(Y, L) | A, C` bivariate normal with means linear in `(A, C)`, and
/// `logit pr(R = 1 | A, C, Y) = eta0 + eta1 A + eta2 C + eta3 Y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub zeta: [f64; 2],
    /// Outcome mean coefficients (intercept, A, C).
    pub upsilon: [f64; 3],
    pub sigma_y_sq: f64,
    /// Confounder mean coefficients (intercept, A, C).
    pub alpha: [f64; 3],
    pub sigma_l_sq: f64,
    pub sigma_yl: f64,
    pub eta: [f64; 4],
}

impl DgpParams {
    /// Weak `L`-`C` association.
    pub fn scenario1() -> Self {
        Self {
            zeta: [-0.44, 0.40],
            upsilon: [0.2, 0.38, 0.3],
            sigma_y_sq: 0.51,
            alpha: [-0.15, 0.215, 0.14],
            sigma_l_sq: 0.43,
            sigma_yl: 0.21,
            eta: [1.0, -1.75, -1.75, 1.25],
        }
    }

    /// Strong `L`-`C` association.
    pub fn scenario2() -> Self {
        Self { zeta: [-0.44, 0.38], alpha: [-0.15, 0.215, 0.914], ..Self::scenario1() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma_y_sq > 0.0 && self.sigma_l_sq > 0.0) {
            return Err("variances must be positive".into());
        }
        if self.sigma_yl * self.sigma_yl >= self.sigma_y_sq * self.sigma_l_sq {
            return Err("covariance matrix of the errors is not positive definite".into());
        }
        Ok(())
    }

    /// Coefficients of `E[L | A, Y, C]` (intercept, A, Y, C).
    pub fn phi(&self) -> [f64; 4] {
        let b = self.sigma_yl / self.sigma_y_sq;
        let [u0, u1, u2] = self.upsilon;
        let [a0, a1, a2] = self.alpha;
        [a0 - b * u0, a1 - b * u1, b, a2 - b * u2]
    }

    pub fn confounder_residual_variance(&self) -> f64 {
        self.sigma_l_sq - self.sigma_yl * self.sigma_yl / self.sigma_y_sq
    }

    /// Coefficients of `E[Y | A, L, C]` (intercept, A, L, C).
    pub fn nu(&self) -> [f64; 4] {
        let b = self.sigma_yl / self.sigma_l_sq;
        let [u0, u1, u2] = self.upsilon;
        let [a0, a1, a2] = self.alpha;
        [u0 - b * a0, u1 - b * a1, b, u2 - b * a2]
    }

    pub fn outcome_residual_variance(&self) -> f64 {
        self.sigma_y_sq - self.sigma_yl * self.sigma_yl / self.sigma_l_sq
    }

    /// Coefficients of `logit pr(A = 1 | L, C)` (intercept, L, C).
    pub fn lambda(&self) -> [f64; 3] {
        let [a0, a1, a2] = self.alpha;
        let s2 = self.sigma_l_sq;
        [self.zeta[0] - a1 * (2.0 * a0 + a1) / (2.0 * s2), a1 / s2, self.zeta[1] - a1 * a2 / s2]
    }

    /// Effect of treatment on the treated: the treatment coefficient of
    /// `E[Y | A, L, C]`, since that regression is linear with no interactions.
    pub fn truth_att(&self) -> f64 {
        self.nu()[1]
    }

    /// One subject's full data `(y, a, c, l)` and observation indicator.
    fn draw<R: Rng>(&self, rng: &mut R) -> (ObservedRecord, bool) {
        let c = rng.sample::<f64, _>(StandardNormal) + rng.random_range(-1.0..1.0);
        let a = u8::from(rng.random::<f64>() < expit(self.zeta[0] + self.zeta[1] * c));
        let af = f64::from(a);
        let sy = self.sigma_y_sq.sqrt();
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let ey = sy * z1;
        let el = self.sigma_yl / sy * z1 + self.confounder_residual_variance().sqrt() * z2;
        let y = self.upsilon[0] + self.upsilon[1] * af + self.upsilon[2] * c + ey;
        let l = self.alpha[0] + self.alpha[1] * af + self.alpha[2] * c + el;
        let [e0, e1, e2, e3] = self.eta;
        let observed = rng.random::<f64>() < expit(e0 + e1 * af + e2 * c + e3 * y);
        (ObservedRecord::complete(y, a, c, l), observed)
    }
}

/// Observed data and the same subjects with every confounder kept.
pub fn generate_with_oracle(params: &DgpParams, n: usize, seed: u64) -> (Dataset, Dataset) {
    let mut rng = stream_rng(seed, streams::DATA);
    let mut observed = Vec::with_capacity(n);
    let mut full = Vec::with_capacity(n);
    for _ in 0..n {
        let (rec, keep) = params.draw(&mut rng);
        full.push(rec);
        observed.push(if keep { rec } else { ObservedRecord::missing(rec.y, rec.a, rec.c) });
    }
    (Dataset::new(observed), Dataset::new(full))
}

pub fn generate_dataset(params: &DgpParams, n: usize, seed: u64) -> Dataset {
    generate_with_oracle(params, n, seed).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dgp {
    Scenario1,
    Scenario2,
    DiscreteToy,
    Custom(DgpParams),
}

impl Dgp {
    pub fn truth_att(&self) -> f64 {
        match self {
            Dgp::Scenario1 => DgpParams::scenario1().truth_att(),
            Dgp::Scenario2 => DgpParams::scenario2().truth_att(),
            Dgp::DiscreteToy => ToyLaw::fixture().att(),
            Dgp::Custom(p) => p.truth_att(),
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> (Dataset, Dataset) {
        match self {
            Dgp::Scenario1 => generate_with_oracle(&DgpParams::scenario1(), n, seed),
            Dgp::Scenario2 => generate_with_oracle(&DgpParams::scenario2(), n, seed),
            Dgp::DiscreteToy => ToyLaw::fixture().sample(n, seed),
            Dgp::Custom(p) => generate_with_oracle(p, n, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub dgp: Dgp,
    pub n: usize,
    pub misspec: Misspecification,
    pub replicates: usize,
    pub master_seed: u64,
    pub estimators: Vec<EstimatorKind>,
    pub m_imputations: usize,
    pub bootstrap_b: Option<usize>,
    /// Attach the sandwich standard error to the doubly robust estimate.
    pub sandwich: bool,
}

impl ScenarioConfig {
    pub fn new(name: impl Into<String>, dgp: Dgp, misspec: Misspecification) -> Self {
        Self {
            name: name.into(),
            dgp,
            n: 2500,
            misspec,
            replicates: 200,
            master_seed: 20_240_501,
            estimators: EstimatorKind::ALL.to_vec(),
            m_imputations: 100,
            bootstrap_b: None,
            sandwich: true,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n < 100 {
            return Err(format!("scenario {}: n must be at least 100, got {}", self.name, self.n));
        }
        if self.replicates == 0 {
            return Err(format!("scenario {}: replicates must be at least 1", self.name));
        }
        if self.estimators.is_empty() {
            return Err(format!("scenario {}: no estimators requested", self.name));
        }
        if self.m_imputations == 0 {
            return Err(format!("scenario {}: m_imputations must be at least 1", self.name));
        }
        if let Dgp::Custom(p) = &self.dgp {
            p.validate().map_err(|e| format!("scenario {}: {e}", self.name))?;
        }
        Ok(())
    }

    pub fn recipe(&self, seed: u64) -> FitRecipe {
        FitRecipe::default().misspecified(self.misspec).with_imputations(self.m_imputations).with_seed(seed)
    }
}

/// The eight panels of the misspecification study: label, data-generating
/// process and switches. The strong `L`-`C` process is used for (g) and (h).
pub fn figure_scenarios() -> Vec<(char, Dgp, Misspecification)> {
    let m = |f_star, p_star, pi_star| Misspecification { f_star, p_star, pi_star };
    vec![
        ('a', Dgp::Scenario1, m(false, false, false)),
        ('b', Dgp::Scenario1, m(true, false, false)),
        ('c', Dgp::Scenario1, m(false, true, false)),
        ('d', Dgp::Scenario1, m(false, false, true)),
        ('e', Dgp::Scenario1, m(false, true, true)),
        ('f', Dgp::Scenario1, m(true, true, false)),
        ('g', Dgp::Scenario2, m(true, false, true)),
        ('h', Dgp::Scenario2, m(true, true, true)),
    ]
}

/// Configuration for one lettered panel.
pub fn figure_scenario(label: char) -> Option<ScenarioConfig> {
    figure_scenarios()
        .into_iter()
        .find(|(l, _, _)| *l == label)
        .map(|(l, dgp, misspec)| ScenarioConfig::new(l.to_string(), dgp, misspec))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scenario: String,
    pub replicate: usize,
    pub estimator: EstimatorKind,
    pub psi_hat: f64,
    pub theta_hat: f64,
    pub att_hat: f64,
    pub se: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub replicate: usize,
    pub estimator: EstimatorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResults {
    pub scenario: String,
    pub truth_att: f64,
    pub rows: Vec<ResultRow>,
    pub failures: Vec<Failure>,
    pub warnings: Vec<String>,
}

/// Seed of replicate `r`: all of its randomness derives from this value.
pub fn replicate_seed(master_seed: u64, replicate: usize) -> u64 {
    derive_seed(master_seed, replicate as u64)
}

/// Every estimate for one replicate.
pub fn run_replicate(config: &ScenarioConfig, replicate: usize) -> (Vec<ResultRow>, Vec<Failure>) {
    let seed = replicate_seed(config.master_seed, replicate);
    let (observed, full) = config.dgp.generate(config.n, seed);
    analyze_replicate(config, replicate, seed, &observed, Some(&full))
}

/// Fit and estimate on one dataset, as the replication loop does.
pub fn analyze_replicate(
    config: &ScenarioConfig,
    replicate: usize,
    seed: u64,
    observed: &Dataset,
    oracle: Option<&Dataset>,
) -> (Vec<ResultRow>, Vec<Failure>) {
    let recipe = config.recipe(seed);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let fits = match fit_nuisances(observed, &recipe) {
        Ok(f) => f,
        Err(e) => {
            let message = e.to_string();
            for &estimator in &config.estimators {
                failures.push(Failure { replicate, estimator, message: message.clone() });
            }
            return (rows, failures);
        }
    };
    let inputs = EstimationInputs { dataset: observed, fits: &fits, oracle, m_imputations: config.m_imputations, seed };
    for &estimator in &config.estimators {
        let outcome = run_estimator(estimator, &inputs).and_then(|report| {
            let se = standard_error(config, estimator, observed, oracle, &fits, &recipe, report.psi_hat, seed)?;
            Ok((report, se))
        });
        match outcome {
            Ok((report, se)) => rows.push(ResultRow {
                scenario: config.name.clone(),
                replicate,
                estimator,
                psi_hat: report.psi_hat,
                theta_hat: report.theta_hat,
                att_hat: report.att_hat,
                se,
                converged: fits.converged.all(),
            }),
            Err(e) => failures.push(Failure { replicate, estimator, message: e.to_string() }),
        }
    }
    (rows, failures)
}

#[allow(clippy::too_many_arguments)]
fn standard_error(
    config: &ScenarioConfig,
    estimator: EstimatorKind,
    observed: &Dataset,
    oracle: Option<&Dataset>,
    fits: &crate::nuisance::NuisanceFits,
    recipe: &FitRecipe,
    psi_hat: f64,
    seed: u64,
) -> Result<Option<f64>, EstimationError> {
    if let Some(b) = config.bootstrap_b {
        let data = if estimator == EstimatorKind::Full { oracle.unwrap_or(observed) } else { observed };
        let report = bootstrap(data, estimator, recipe, b, derive_seed(seed, streams::BOOTSTRAP))?;
        return Ok(report.bootstrap_var.map(f64::sqrt));
    }
    if config.sandwich && estimator == EstimatorKind::Dr {
        return Ok(sandwich_variance(observed, fits, psi_hat)?.sandwich_var.map(f64::sqrt));
    }
    Ok(None)
}

/// Run all replicates in parallel; rows come back in replicate order.
pub fn run_monte_carlo(config: &ScenarioConfig) -> Result<MonteCarloResults, String> {
    config.validate()?;
    let per_rep: Vec<(Vec<ResultRow>, Vec<Failure>)> =
        (0..config.replicates).into_par_iter().map(|r| run_replicate(config, r)).collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_rep {
        rows.extend(r);
        failures.extend(f);
    }
    let mut warnings = Vec::new();
    let attempted = config.replicates * config.estimators.len();
    if failures.len() as f64 > 0.05 * attempted as f64 {
        warnings.push(format!(
            "scenario {}: {} of {} estimates failed",
            config.name,
            failures.len(),
            attempted
        ));
    }
    Ok(MonteCarloResults { scenario: config.name.clone(), truth_att: config.dgp.truth_att(), rows, failures, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub mean_bias: f64,
    pub mc_sd: f64,
    /// Monte Carlo standard error of the mean bias.
    pub mc_se: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub iqr: f64,
    pub median_se: Option<f64>,
    /// Monte Carlo standard deviation of `psi_hat`.
    pub psi_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub scenario: String,
    pub estimator: EstimatorKind,
    pub successes: usize,
    pub failures: usize,
    /// `None` when fewer than two replicates succeeded.
    pub stats: Option<SummaryStats>,
}

/// Summary statistics of `att_hat` per estimator against `truth`.
pub fn summarize(results: &MonteCarloResults, truth: f64) -> Vec<EstimatorSummary> {
    let mut kinds: Vec<EstimatorKind> = results.rows.iter().map(|r| r.estimator).chain(results.failures.iter().map(|f| f.estimator)).collect();
    kinds.sort();
    kinds.dedup();
    kinds
        .into_iter()
        .map(|estimator| {
            let rows: Vec<&ResultRow> = results.rows.iter().filter(|r| r.estimator == estimator).collect();
            let failures = results.failures.iter().filter(|f| f.estimator == estimator).count();
            let att: Vec<f64> = rows.iter().map(|r| r.att_hat).collect();
            let psi: Vec<f64> = rows.iter().map(|r| r.psi_hat).collect();
            let ses: Vec<f64> = rows.iter().filter_map(|r| r.se).collect();
            EstimatorSummary {
                scenario: results.scenario.clone(),
                estimator,
                successes: att.len(),
                failures,
                stats: summary_stats(&att, &psi, &ses, truth),
            }
        })
        .collect()
}

pub fn summary_stats(att: &[f64], psi: &[f64], ses: &[f64], truth: f64) -> Option<SummaryStats> {
    if att.len() < 2 {
        return None;
    }
    let mut sorted = att.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let mc_sd = sample_variance(att).max(0.0).sqrt();
    let median_se = if ses.is_empty() {
        None
    } else {
        let mut s = ses.to_vec();
        s.sort_by(f64::total_cmp);
        Some(quantile_sorted(&s, 0.5))
    };
    Some(SummaryStats {
        mean_bias: mean(att) - truth,
        mc_sd,
        mc_se: mc_sd / (att.len() as f64).sqrt(),
        min: sorted[0],
        q1,
        median: quantile_sorted(&sorted, 0.5),
        q3,
        max: sorted[sorted.len() - 1],
        iqr: q3 - q1,
        median_se,
        psi_sd: if psi.len() >= 2 { sample_variance(psi).max(0.0).sqrt() } else { 0.0 },
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Tidy per-replicate table.
pub fn write_results_csv<W: Write>(rows: &[ResultRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "replicate", "estimator", "psi_hat", "theta_hat", "att_hat", "se", "converged"])?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.replicate.to_string(),
            r.estimator.name().to_string(),
            r.psi_hat.to_string(),
            r.theta_hat.to_string(),
            r.att_hat.to_string(),
            fmt_opt(r.se),
            r.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const SUMMARY_HEADER: [&str; 16] = [
    "scenario", "estimator", "truth", "successes", "failures", "mean_bias", "mc_sd", "mc_se", "min", "q1", "median", "q3",
    "max", "iqr", "median_se", "psi_sd",
];

pub fn write_summary_csv<W: Write>(summaries: &[(f64, EstimatorSummary)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for (truth, s) in summaries {
        let mut rec = vec![s.scenario.clone(), s.estimator.name().to_string(), truth.to_string(), s.successes.to_string(), s.failures.to_string()];
        match &s.stats {
            Some(st) => rec.extend(
                [st.mean_bias, st.mc_sd, st.mc_se, st.min, st.q1, st.median, st.q3, st.max, st.iqr]
                    .iter()
                    .map(|v| v.to_string())
                    .chain([fmt_opt(st.median_se), st.psi_sd.to_string()]),
            ),
            None => rec.extend(std::iter::repeat_n(String::new(), 11)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Box-plot quantiles `(min, q1, median, q3, max)` per estimator.
pub fn write_boxplot_csv<W: Write>(summaries: &[EstimatorSummary], truth: f64, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "estimator", "truth", "min", "q1", "median", "q3", "max"])?;
    for s in summaries {
        if let Some(st) = &s.stats {
            let vals = [truth, st.min, st.q1, st.median, st.q3, st.max];
            let mut rec = vec![s.scenario.clone(), s.estimator.name().to_string()];
            rec.extend(vals.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_blocks_match_listed_values() {
        let p = DgpParams::scenario1();
        let phi = p.phi();
        let nu = p.nu();
        let lambda = p.lambda();
        for (got, want) in phi.iter().zip([-0.23, 0.058, 0.41, 0.016]) {
            assert!((got - want).abs() < 0.01, "phi {got} vs {want}");
        }
        for (got, want) in nu.iter().zip([0.27, 0.275, 0.49, 0.23]) {
            assert!((got - want).abs() < 0.01, "nu {got} vs {want}");
        }
        assert!((lambda[0] + 0.42).abs() < 0.01);
        assert!((lambda[1] - 0.5).abs() < 1e-12);
        let q = DgpParams::scenario2();
        assert!((q.phi()[3] - 0.79).abs() < 0.01);
        assert!((q.nu()[3] + 0.146).abs() < 0.01);
        assert!((p.truth_att() - 0.275).abs() < 1e-12);
    }

    #[test]
    fn hand_summary() {
        let s = summary_stats(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5], &[], 3.0).unwrap();
        assert_eq!(s.mean_bias, 0.0);
        assert_eq!((s.q1, s.median, s.q3), (2.0, 3.0, 4.0));
        let c = summary_stats(&[0.7; 6], &[0.1; 6], &[], 0.5).unwrap();
        assert!(c.mc_sd < 1e-15);
        assert_eq!(c.iqr, 0.0);
        assert!(summary_stats(&[1.0], &[1.0], &[], 0.0).is_none());
    }

    #[test]
    fn saturated_observation_logit_keeps_everything() {
        let p = DgpParams { eta: [50.0, 0.0, 0.0, 0.0], ..DgpParams::scenario1() };
        assert!(generate_dataset(&p, 2000, 3).all_observed());
    }

    #[test]
    fn scenario_grid() {
        let grid = figure_scenarios();
        assert_eq!(grid.len(), 8);
        let labels: String = grid.iter().map(|g| g.0).collect();
        assert_eq!(labels, "abcdefgh");
        assert!(grid[0].2.is_empty());
        assert_eq!(grid[7].2, Misspecification { f_star: true, p_star: true, pi_star: true });
        assert_eq!(grid[6].1, Dgp::Scenario2);
        assert_eq!(grid[5].1, Dgp::Scenario1);
    }
}
