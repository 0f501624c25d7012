//! Nuisance models for the missing-confounder problem and their fitting.
//!
//! Four working models enter the estimators:
//! - missingness `pr(R = 1 | A, C, Y)`, logistic;
//! - propensity `pr(A = 1 | L, C)`, logistic fitted on complete cases with
//!   inverse-probability-of-observation weights;
//! - confounder `L | A, Y, C`, Gaussian linear fitted on complete cases;
//! - outcome `E[Y | A, L, C]`, linear, fitted on complete cases stacked with
//!   `M` imputations of each missing confounder drawn from the confounder model.
//!
//! Estimators only see the [`Nuisance`] trait, so the exact laws of the
//! discrete toy distribution plug into the same code.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Covariates, Dataset, ObservedRecord};
use crate::estimators::EstimationError;
use crate::glm::{
    fit_ipw_logistic, fit_missingness, Column, Design, DesignSpec, GlmError, LinearModel, MissingnessModel,
    NormalEquations,
};
use crate::numeric::{expit, mean};
use crate::rng::{derive_seed, stream_rng, streams};

/// Largest exponent accepted before reporting overflow.
const MAX_EXPONENT: f64 = 700.0;

/// Closed-form conditional expectations given the observed data `(Y, A, C)`:
/// `e_odds = E[p/(1-p) | Y, A, C]`, `zeta = E[p/(1-p) m(0, L, C) | Y, A, C]`
/// and `v4_mean = E[m(0, L, C) | Y, A, C]`, all under the confounder model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondTerms {
    pub e_odds: f64,
    pub zeta: f64,
    pub v4_mean: f64,
}

/// The nuisance quantities an influence-function estimator consumes.
pub trait Nuisance {
    /// `pr(R = 1 | A, C, Y)`.
    fn pi(&self, rec: &ObservedRecord) -> f64;
    /// `pr(A = 1 | L, C)`.
    fn propensity(&self, l: f64, c: f64) -> f64;
    /// `p / (1 - p)`; override when it can be computed without cancellation.
    fn odds(&self, l: f64, c: f64) -> f64 {
        let p = self.propensity(l, c);
        p / (1.0 - p)
    }
    /// `E[Y | A = 0, L, C]`.
    fn outcome_mean0(&self, l: f64, c: f64) -> f64;
    fn cond_terms(&self, rec: &ObservedRecord) -> Result<CondTerms, EstimationError>;
    fn pr_a1(&self) -> f64;
}

/// Which variables enter each working model, plus the imputation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRecipe {
    pub missingness: Design,
    pub propensity: Design,
    pub confounder: Design,
    pub outcome: Design,
    pub m_imputations: usize,
    pub seed: u64,
}

impl Default for FitRecipe {
    fn default() -> Self {
        Self {
            missingness: Design::new(vec![Column::A, Column::C, Column::Y]),
            propensity: Design::new(vec![Column::L, Column::C]),
            confounder: Design::new(vec![Column::A, Column::Y, Column::C]),
            outcome: Design::new(vec![Column::A, Column::L, Column::C]),
            m_imputations: 100,
            seed: 0,
        }
    }
}

/// Model misspecification switches. Each drops `C` from the affected models
/// while keeping every `L` coefficient, so the `A`-`L` odds ratio keeps its form.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Misspecification {
    /// Confounder and outcome models omit `C`.
    pub f_star: bool,
    /// Propensity omits `C`.
    pub p_star: bool,
    /// Missingness regressed on `C` only.
    pub pi_star: bool,
}

impl Misspecification {
    pub const NONE: Misspecification = Misspecification { f_star: false, p_star: false, pi_star: false };

    pub fn is_empty(&self) -> bool {
        !(self.f_star || self.p_star || self.pi_star)
    }

    /// Parse a comma-separated list such as `"f_star,pi_star"`.
    pub fn parse_list(s: &str) -> Result<Self, String> {
        let mut m = Misspecification::NONE;
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            m.set(tok)?;
        }
        Ok(m)
    }

    pub fn set(&mut self, switch: &str) -> Result<(), String> {
        match switch.to_ascii_lowercase().replace('*', "_star").as_str() {
            "f_star" | "fstar" | "f" => self.f_star = true,
            "p_star" | "pstar" | "p" => self.p_star = true,
            "pi_star" | "pistar" | "pi" => self.pi_star = true,
            other => return Err(format!("unknown misspecification switch `{other}`")),
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.f_star {
            v.push("f_star");
        }
        if self.p_star {
            v.push("p_star");
        }
        if self.pi_star {
            v.push("pi_star");
        }
        v
    }
}

impl FitRecipe {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_imputations(mut self, m: usize) -> Self {
        self.m_imputations = m;
        self
    }

    pub fn misspecified(&self, switches: Misspecification) -> FitRecipe {
        let mut r = self.clone();
        if switches.f_star {
            r.confounder = r.confounder.without(Column::C);
            r.outcome = r.outcome.without(Column::C);
        }
        if switches.p_star {
            r.propensity = r.propensity.without(Column::C);
        }
        if switches.pi_star {
            r.missingness = Design::new(vec![Column::C]);
        }
        r
    }

    /// Check each design only uses variables its model may condition on.
    pub fn validate(&self) -> Result<(), EstimationError> {
        let check = |name: &str, d: &Design, allowed: &[Column]| {
            match d.columns().iter().find(|c| !allowed.contains(c)) {
                Some(c) => Err(EstimationError::InvalidDesign(format!("{name} model cannot use `{}`", c.name()))),
                None => Ok(()),
            }
        };
        check("missingness", &self.missingness, &[Column::A, Column::C, Column::Y])?;
        check("propensity", &self.propensity, &[Column::L, Column::C])?;
        check("confounder", &self.confounder, &[Column::A, Column::Y, Column::C])?;
        check("outcome", &self.outcome, &[Column::A, Column::L, Column::C])?;
        if self.m_imputations == 0 {
            return Err(EstimationError::InvalidArgument("at least one imputation is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvergenceFlags {
    pub missingness: bool,
    pub propensity: bool,
    pub confounder: bool,
    pub outcome: bool,
}

impl ConvergenceFlags {
    pub fn all(&self) -> bool {
        self.missingness && self.propensity && self.confounder && self.outcome
    }
}

/// Standard-normal draws used to impute each missing confounder, one block of
/// `n_missing` draws per imputation.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputations {
    pub missing: Vec<usize>,
    pub m: usize,
    pub z: Vec<f64>,
}

impl Imputations {
    /// Imputation `k` draws from its own stream, so the result does not depend
    /// on evaluation order.
    pub fn draw(dataset: &Dataset, m: usize, seed: u64) -> Self {
        let missing: Vec<usize> = dataset.iter().enumerate().filter(|(_, r)| !r.is_complete()).map(|(i, _)| i).collect();
        let mut z = Vec::with_capacity(m * missing.len());
        if !missing.is_empty() {
            for k in 0..m {
                let mut rng = stream_rng(derive_seed(seed, k as u64), streams::MCDLM);
                z.extend((0..missing.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
            }
        }
        Self { missing, m, z }
    }

    pub fn draws(&self, k: usize) -> &[f64] {
        let n = self.missing.len();
        &self.z[k * n..(k + 1) * n]
    }
}

/// Fitted parameter blocks for the four working models.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFits {
    pub missingness: MissingnessModel,
    pub propensity: LinearModel,
    pub confounder: LinearModel,
    pub sigma_l_sq: f64,
    pub outcome: LinearModel,
    pub sigma_y_sq: f64,
    pub pr_a1: f64,
    pub converged: ConvergenceFlags,
    pub imputations: Imputations,
    pub recipe: FitRecipe,
    /// Complete cases used by the confounder fit.
    pub n_complete: usize,
}

fn glm_err(block: &'static str) -> impl Fn(GlmError) -> EstimationError {
    move |source| EstimationError::from_glm(block, source)
}

/// Fit every working model in `recipe` to `dataset`.
pub fn fit_nuisances(dataset: &Dataset, recipe: &FitRecipe) -> Result<NuisanceFits, EstimationError> {
    recipe.validate()?;
    check_arms(dataset.iter(), "full sample")?;
    let n_complete = dataset.n_complete();
    if n_complete == 0 {
        return Err(EstimationError::NoCompleteCases);
    }
    check_arms(dataset.iter().filter(|r| r.is_complete()), "complete cases")?;

    let (missingness, pi_fit) = fit_missingness(dataset, &recipe.missingness).map_err(glm_err("missingness"))?;
    let (propensity, p_fit) =
        fit_ipw_logistic(dataset, &missingness, Column::A, &recipe.propensity).map_err(glm_err("propensity"))?;

    let cc: Vec<ObservedRecord> = dataset.iter().filter(|r| r.is_complete()).copied().collect();
    let (x, y) = DesignSpec::new(Column::L, recipe.confounder.clone()).build(&cc).map_err(glm_err("confounder"))?;
    let t_fit = crate::glm::fit_linear(&x, &y, None).map_err(glm_err("confounder"))?;
    let confounder = LinearModel::new(recipe.confounder.clone(), t_fit.coefficients.clone());
    let sigma_l_sq = t_fit.residual_variance.unwrap_or(0.0);
    if sigma_l_sq.is_nan() || sigma_l_sq <= 0.0 {
        return Err(EstimationError::InvalidArgument("confounder model has zero residual variance".into()));
    }

    let imputations = Imputations::draw(dataset, recipe.m_imputations, recipe.seed);
    let (outcome, sigma_y_sq) = fit_stacked_outcome(dataset, &confounder, sigma_l_sq, &recipe.outcome, &imputations)?;

    let a: Vec<f64> = dataset.iter().map(|r| r.a_f64()).collect();
    Ok(NuisanceFits {
        missingness,
        propensity,
        confounder,
        sigma_l_sq,
        outcome,
        sigma_y_sq,
        pr_a1: mean(&a),
        converged: ConvergenceFlags { missingness: pi_fit.converged, propensity: p_fit.converged, confounder: true, outcome: true },
        imputations,
        recipe: recipe.clone(),
        n_complete,
    })
}

pub(crate) fn check_arms<'a>(records: impl Iterator<Item = &'a ObservedRecord>, context: &'static str) -> Result<(), EstimationError> {
    let (mut n0, mut n1) = (0usize, 0usize);
    for r in records {
        if r.treated() {
            n1 += 1;
        } else {
            n0 += 1;
        }
    }
    if n1 == 0 {
        return Err(EstimationError::EmptyArm { arm: 1, context });
    }
    if n0 == 0 {
        return Err(EstimationError::EmptyArm { arm: 0, context });
    }
    Ok(())
}

/// Imputed confounder `mu_L(A, Y, C) + sigma_L z`.
pub fn impute_confounder(confounder: &LinearModel, sigma_l: f64, rec: &ObservedRecord, z: f64) -> f64 {
    confounder.predict(&rec.with_l(f64::NAN)) + sigma_l * z
}

/// Outcome regression on complete cases (each counted `M` times) stacked with
/// `M` imputed copies of every incomplete record.
pub fn fit_stacked_outcome(
    dataset: &Dataset,
    confounder: &LinearModel,
    sigma_l_sq: f64,
    design: &Design,
    imputations: &Imputations,
) -> Result<(LinearModel, f64), EstimationError> {
    let mut ne = NormalEquations::new(design.width());
    let stack_weight = if imputations.missing.is_empty() { 1.0 } else { imputations.m as f64 };
    let mut row = vec![0.0; design.width()];
    for rec in dataset.iter().filter(|r| r.is_complete()) {
        design.fill_row(&rec.covariates().expect("complete record"), &mut row);
        ne.add(&row, rec.y, stack_weight);
    }
    let sigma_l = sigma_l_sq.sqrt();
    for k in 0..imputations.m {
        for (&i, &z) in imputations.missing.iter().zip(imputations.draws(k)) {
            let rec = &dataset.records()[i];
            let l = impute_confounder(confounder, sigma_l, rec, z);
            design.fill_row(&rec.with_l(l), &mut row);
            ne.add(&row, rec.y, 1.0);
        }
    }
    let fit = ne.solve().map_err(glm_err("outcome"))?;
    let var = fit.residual_variance.unwrap_or(0.0);
    Ok((LinearModel::new(design.clone(), fit.coefficients), var))
}

fn checked_exp(x: f64) -> Result<f64, EstimationError> {
    if x > MAX_EXPONENT || x.is_nan() {
        Err(EstimationError::Overflow { predictor: x })
    } else {
        Ok(x.exp())
    }
}

/// Confounder-free parts of the Gaussian working models at one record:
/// propensity `off_p + lambda_l L`, untreated outcome `off_m + nu_l L`,
/// and the confounder mean `mu_l` given the record's `(A, Y, C)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AffineParts {
    pub off_p: f64,
    pub lambda_l: f64,
    pub off_m: f64,
    pub nu_l: f64,
    pub mu_l: f64,
}

impl NuisanceFits {
    pub fn eta(&self) -> &[f64] {
        self.missingness.coefficients()
    }

    pub fn lambda(&self) -> &[f64] {
        &self.propensity.coefficients
    }

    pub fn phi(&self) -> &[f64] {
        &self.confounder.coefficients
    }

    pub fn nu(&self) -> &[f64] {
        &self.outcome.coefficients
    }

    pub(crate) fn affine_parts(&self, rec: &ObservedRecord) -> AffineParts {
        let x = rec.with_l(0.0);
        let (off_p, lambda_l) = self.propensity.split_confounder(&x);
        let untreated = Covariates { a: 0.0, ..x };
        let (off_m, nu_l) = self.outcome.split_confounder(&untreated);
        let mu_l = self.confounder.predict(&rec.with_l(f64::NAN));
        AffineParts { off_p, lambda_l, off_m, nu_l, mu_l }
    }

    /// All parameters stacked as (η, λ, φ, σ_L², ν).
    pub fn parameters(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.eta());
        v.extend_from_slice(self.lambda());
        v.extend_from_slice(self.phi());
        v.push(self.sigma_l_sq);
        v.extend_from_slice(self.nu());
        v
    }

    /// Copy with the stacked parameter vector replaced.
    pub fn with_parameters(&self, xi: &[f64]) -> NuisanceFits {
        assert_eq!(xi.len(), self.parameters().len(), "parameter vector length");
        let mut out = self.clone();
        let mut at = 0;
        let mut take = |len: usize| {
            let s = xi[at..at + len].to_vec();
            at += len;
            s
        };
        if let MissingnessModel::Logistic(m) = &mut out.missingness {
            m.coefficients = take(m.coefficients.len());
        }
        out.propensity.coefficients = take(out.propensity.coefficients.len());
        out.confounder.coefficients = take(out.confounder.coefficients.len());
        out.sigma_l_sq = take(1)[0];
        out.outcome.coefficients = take(out.outcome.coefficients.len());
        out
    }
}

impl Nuisance for NuisanceFits {
    fn pi(&self, rec: &ObservedRecord) -> f64 {
        self.missingness.prob(rec)
    }

    fn propensity(&self, l: f64, c: f64) -> f64 {
        expit(self.propensity.predict(&Covariates { y: f64::NAN, a: f64::NAN, c, l }))
    }

    fn odds(&self, l: f64, c: f64) -> f64 {
        self.propensity.predict(&Covariates { y: f64::NAN, a: f64::NAN, c, l }).exp()
    }

    fn outcome_mean0(&self, l: f64, c: f64) -> f64 {
        self.outcome.predict(&Covariates { y: f64::NAN, a: 0.0, c, l })
    }

    fn cond_terms(&self, rec: &ObservedRecord) -> Result<CondTerms, EstimationError> {
        let s = self.affine_parts(rec);
        let s2 = self.sigma_l_sq;
        // Gaussian moment generating function at the L coefficient
        let e_odds = checked_exp(s.off_p + s.lambda_l * s.mu_l + 0.5 * s2 * s.lambda_l * s.lambda_l)?;
        // tilting N(mu, s2) by exp(lambda_l L) shifts its mean by s2 lambda_l
        let zeta = e_odds * (s.off_m + s.nu_l * (s.mu_l + s2 * s.lambda_l));
        let v4_mean = s.off_m + s.nu_l * s.mu_l;
        Ok(CondTerms { e_odds, zeta, v4_mean })
    }

    fn pr_a1(&self) -> f64 {
        self.pr_a1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario_one_fits() -> NuisanceFits {
        // confounder model with A = 0: mean -0.23 + 0.41 Y + 0.016 C
        NuisanceFits {
            missingness: MissingnessModel::AlwaysObserved,
            propensity: LinearModel::new(Design::new(vec![Column::L, Column::C]), vec![-0.42, 0.5, 0.36]),
            confounder: LinearModel::new(Design::new(vec![Column::A, Column::Y, Column::C]), vec![-0.23, 0.058, 0.41, 0.016]),
            sigma_l_sq: 0.43 * (1.0 - 0.21 * 0.21 / (0.43 * 0.51)),
            outcome: LinearModel::new(Design::new(vec![Column::A, Column::L, Column::C]), vec![0.275, 0.275, 0.49, 0.23]),
            sigma_y_sq: 0.4,
            pr_a1: 0.4,
            converged: ConvergenceFlags { missingness: true, propensity: true, confounder: true, outcome: true },
            imputations: Imputations { missing: vec![], m: 1, z: vec![] },
            recipe: FitRecipe::default(),
            n_complete: 1,
        }
    }

    #[test]
    fn odds_term_reduces_without_confounder_slope() {
        let mut fits = scenario_one_fits();
        fits.propensity.coefficients[1] = 0.0;
        let rec = ObservedRecord::missing(0.7, 0, 1.3);
        let t = fits.cond_terms(&rec).unwrap();
        assert!((t.e_odds - (-0.42 + 0.36 * 1.3_f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn outcome_terms_reduce_without_confounder_slope() {
        let mut fits = scenario_one_fits();
        fits.outcome.coefficients[2] = 0.0;
        let rec = ObservedRecord::missing(0.7, 1, -0.4);
        let t = fits.cond_terms(&rec).unwrap();
        let base = 0.275 + 0.23 * -0.4;
        assert!((t.v4_mean - base).abs() < 1e-14);
        assert!((t.zeta - t.e_odds * base).abs() < 1e-14);
    }

    #[test]
    fn odds_term_at_origin() {
        let mut fits = scenario_one_fits();
        fits.sigma_l_sq = 0.43;
        let t = fits.cond_terms(&ObservedRecord::missing(0.0, 0, 0.0)).unwrap();
        assert!((t.e_odds - (-0.48125_f64).exp()).abs() < 1e-12);
        assert!((t.e_odds - 0.6180).abs() < 1e-4);
    }

    #[test]
    fn treated_term_uses_treated_confounder_mean() {
        let fits = scenario_one_fits();
        let t = fits.cond_terms(&ObservedRecord::missing(0.5, 1, 2.0)).unwrap();
        let expected = 0.275 + 0.23 * 2.0 + 0.49 * (-0.23 + 0.058 + 0.41 * 0.5 + 0.016 * 2.0);
        assert!((t.v4_mean - expected).abs() < 1e-14);
    }

    #[test]
    fn misspecification_switches() {
        let base = FitRecipe::default();
        assert_eq!(base.misspecified(Misspecification::NONE), base);
        let p = base.misspecified(Misspecification { p_star: true, ..Misspecification::NONE });
        assert_eq!(p.propensity.columns(), &[Column::L]);
        let pi = base.misspecified(Misspecification { pi_star: true, ..Misspecification::NONE });
        assert_eq!(pi.missingness.columns(), &[Column::C]);
        let f = base.misspecified(Misspecification { f_star: true, ..Misspecification::NONE });
        assert_eq!(f.confounder.columns(), &[Column::A, Column::Y]);
        assert_eq!(f.outcome.columns(), &[Column::A, Column::L]);
        assert!(Misspecification::parse_list("f_star, bogus").is_err());
        assert_eq!(Misspecification::parse_list("pi*,p_star").unwrap().labels(), vec!["p_star", "pi_star"]);
    }

    #[test]
    fn overflow_is_reported() {
        let mut fits = scenario_one_fits();
        fits.propensity.coefficients[0] = 800.0;
        assert!(matches!(fits.cond_terms(&ObservedRecord::missing(0.0, 0, 0.0)), Err(EstimationError::Overflow { .. })));
    }

    #[test]
    fn parameter_round_trip() {
        let fits = scenario_one_fits();
        let xi = fits.parameters();
        assert_eq!(xi.len(), 3 + 4 + 1 + 4);
        assert_eq!(fits.with_parameters(&xi), fits);
    }
}
