//! Variance estimation for the doubly robust estimator.
//!
//! The sandwich treats `Psi` and the nuisance parameters
//! `Xi = (eta, lambda, phi, sigma_L^2, nu)` as the joint root of stacked
//! estimating equations. Write `Z` for the per-record estimating function of
//! `Psi` (the influence function scaled by `pr(A = 1)`) and `Q` for the
//! stacked nuisance scores. Then
//!
//! ```text
//! V = Z - (d/dXi P_n Z) (d/dXi P_n Q)^{-1} Q,
//! var(Psi_hat) = P_n[V^2] / (P_n dZ/dPsi)^2 / n.
//! ```
//!
//! All derivatives are analytic; the tests compare them with central
//! differences.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::data::{Covariates, Dataset, ObservedRecord};
use crate::estimators::{run_estimator, EstimationError, EstimationInputs, EstimatorKind, InfluenceContext};
use crate::glm::{Column, MissingnessModel};
use crate::numeric::{mean, quantile_sorted, sample_variance, CompensatedSum};
use crate::nuisance::{fit_nuisances, FitRecipe, Nuisance, NuisanceFits};
use crate::rng::{derive_seed, stream_rng, streams};

/// Share of bootstrap replicates allowed to fail before giving up.
pub const MAX_DROPPED_FRACTION: f64 = 0.10;
pub const MIN_BOOTSTRAP_REPLICATES: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub sandwich_var: Option<f64>,
    pub bootstrap_var: Option<f64>,
    pub bootstrap_ci: Option<(f64, f64)>,
    /// Bootstrap replicates that produced an estimate.
    pub replicates: usize,
    pub dropped: usize,
}

/// Sizes of the nuisance blocks in the stacked parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub eta: usize,
    pub lambda: usize,
    pub phi: usize,
    pub sigma: usize,
    pub nu: usize,
}

impl BlockDims {
    pub fn of(fits: &NuisanceFits) -> Self {
        Self { eta: fits.eta().len(), lambda: fits.lambda().len(), phi: fits.phi().len(), sigma: 1, nu: fits.nu().len() }
    }

    pub fn total(&self) -> usize {
        self.eta + self.lambda + self.phi + self.sigma + self.nu
    }

    fn offsets(&self) -> [usize; 5] {
        let l = self.eta;
        let f = l + self.lambda;
        let s = f + self.phi;
        let n = s + self.sigma;
        [0, l, f, s, n]
    }

    pub fn names(&self) -> [(&'static str, usize, usize); 5] {
        let o = self.offsets();
        [
            ("missingness", o[0], self.eta),
            ("propensity", o[1], self.lambda),
            ("confounder mean", o[2], self.phi),
            ("confounder variance", o[3], self.sigma),
            ("outcome", o[4], self.nu),
        ]
    }
}

/// Per-record estimating functions at the fitted values.
#[derive(Debug, Clone)]
pub struct ScoreStack {
    /// Stacked nuisance scores, one row per record.
    pub q: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub dims: BlockDims,
}

impl ScoreStack {
    pub fn column_means(&self) -> Vec<f64> {
        let p = self.dims.total();
        (0..p).map(|j| mean(&self.q.iter().map(|r| r[j]).collect::<Vec<_>>())).collect()
    }
}

struct Rows<'a> {
    fits: &'a NuisanceFits,
    l_in_p: Option<usize>,
    l_in_m: Option<usize>,
}

impl<'a> Rows<'a> {
    fn new(fits: &'a NuisanceFits) -> Self {
        Self { fits, l_in_p: fits.propensity.design.position(Column::L), l_in_m: fits.outcome.design.position(Column::L) }
    }

    fn pi(&self, rec: &ObservedRecord) -> Option<Vec<f64>> {
        match &self.fits.missingness {
            MissingnessModel::Logistic(m) => Some(m.design.row(&rec.with_l(f64::NAN))),
            MissingnessModel::AlwaysObserved => None,
        }
    }

    fn p(&self, l: f64, c: f64) -> Vec<f64> {
        self.fits.propensity.design.row(&Covariates { y: f64::NAN, a: f64::NAN, c, l })
    }

    fn m(&self, a: f64, l: f64, c: f64) -> Vec<f64> {
        self.fits.outcome.design.row(&Covariates { y: f64::NAN, a, c, l })
    }

    fn t(&self, rec: &ObservedRecord) -> Vec<f64> {
        self.fits.confounder.design.row(&rec.with_l(f64::NAN))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Degrees-of-freedom factor in the confounder-variance equation, chosen so
/// its empirical mean vanishes at the reported residual variance.
fn dof_factor(fits: &NuisanceFits) -> f64 {
    let n_cc = fits.n_complete as f64;
    (n_cc - fits.confounder.design.width() as f64) / n_cc
}

/// Estimating function of `Psi`: `pr(A = 1)` times the observed-data influence function.
pub fn z_values(dataset: &Dataset, fits: &NuisanceFits, psi: f64) -> Result<Vec<f64>, EstimationError> {
    let ctx = InfluenceContext::new(dataset, fits)?;
    Ok(dataset.iter().enumerate().map(|(i, r)| fits.pr_a1 * ctx.iota_miss(i, r, psi)).collect())
}

/// Stacked nuisance scores and `Z` for every record.
pub fn score_stack(dataset: &Dataset, fits: &NuisanceFits, psi: f64) -> Result<ScoreStack, EstimationError> {
    let dims = BlockDims::of(fits);
    let off = dims.offsets();
    let rows = Rows::new(fits);
    let z = z_values(dataset, fits, psi)?;
    let sigma_l = fits.sigma_l_sq.sqrt();
    let c_dof = dof_factor(fits);
    let imputed = imputation_lookup(dataset, fits);
    let mut q = Vec::with_capacity(dataset.n());
    for (i, rec) in dataset.iter().enumerate() {
        let mut row = vec![0.0; dims.total()];
        let pi = fits.pi(rec);
        if let Some(xpi) = rows.pi(rec) {
            axpy(&mut row[off[0]..off[1]], f64::from(rec.r) - pi, &xpi);
        }
        let mu = fits.confounder.predict(&rec.with_l(f64::NAN));
        match rec.l {
            Some(l) => {
                let xp = rows.p(l, rec.c);
                let p = fits.propensity(l, rec.c);
                axpy(&mut row[off[1]..off[2]], (rec.a_f64() - p) / pi, &xp);
                axpy(&mut row[off[2]..off[3]], l - mu, &rows.t(rec));
                row[off[3]] = (l - mu) * (l - mu) - fits.sigma_l_sq * c_dof;
                let xm = rows.m(rec.a_f64(), l, rec.c);
                axpy(&mut row[off[4]..], rec.y - dot(fits.nu(), &xm), &xm);
            }
            None => {
                let draws = imputed[i].expect("missing record has imputations");
                let m = fits.imputations.m as f64;
                for k in 0..fits.imputations.m {
                    let lk = mu + sigma_l * fits.imputations.draws(k)[draws];
                    let xm = rows.m(rec.a_f64(), lk, rec.c);
                    axpy(&mut row[off[4]..], (rec.y - dot(fits.nu(), &xm)) / m, &xm);
                }
            }
        }
        q.push(row);
    }
    Ok(ScoreStack { q, z, dims })
}

/// Position of each missing record within the imputation blocks.
fn imputation_lookup(dataset: &Dataset, fits: &NuisanceFits) -> Vec<Option<usize>> {
    let mut v = vec![None; dataset.n()];
    for (j, &i) in fits.imputations.missing.iter().enumerate() {
        v[i] = Some(j);
    }
    v
}

/// `d/dXi P_n Z` and `P_n dZ/dPsi`.
pub fn z_gradient(dataset: &Dataset, fits: &NuisanceFits, psi: f64) -> Result<(Vec<f64>, f64), EstimationError> {
    let dims = BlockDims::of(fits);
    let off = dims.offsets();
    let rows = Rows::new(fits);
    let ctx = InfluenceContext::new(dataset, fits)?;
    let s2 = fits.sigma_l_sq;
    let mut acc: Vec<CompensatedSum> = vec![CompensatedSum::new(); dims.total()];
    let mut dpsi = CompensatedSum::new();
    let mut g = vec![0.0; dims.total()];
    for (i, rec) in dataset.iter().enumerate() {
        g.iter_mut().for_each(|v| *v = 0.0);
        let a = rec.a_f64();
        let u = 1.0 - a;
        let parts = fits.affine_parts(rec);
        let terms = ctx.terms[i];
        let (e, lam, nul, mu) = (terms.e_odds, parts.lambda_l, parts.nu_l, parts.mu_l);
        let shifted = mu + s2 * lam;
        let b = parts.off_m + nul * shifted;
        let projected = u * (rec.y * e - terms.zeta) + a * (terms.v4_mean - psi);
        let w = if rec.is_complete() { 1.0 / ctx.pi_hat[i] } else { 0.0 };
        let keep = 1.0 - w;

        // projection pieces
        let xp_shift = rows.p(shifted, rec.c);
        let mut de_dlam = xp_shift.clone();
        de_dlam.iter_mut().for_each(|v| *v *= e);
        let mut dproj_dlam: Vec<f64> = de_dlam.iter().map(|d| u * (rec.y * d - b * d)).collect();
        if let Some(j) = rows.l_in_p {
            dproj_dlam[j] -= u * e * nul * s2;
        }
        let dproj_dmu = u * (rec.y * e * lam - (e * lam * b + e * nul)) + a * nul;
        let dproj_ds2 = u * (rec.y * 0.5 * lam * lam * e - (0.5 * lam * lam * e * b + e * nul * lam));
        let xm_shift = rows.m(0.0, shifted, rec.c);
        let xm_mu = rows.m(0.0, mu, rec.c);
        let dproj_dnu: Vec<f64> = xm_shift.iter().zip(&xm_mu).map(|(s, m)| -u * e * s + a * m).collect();

        axpy(&mut g[off[1]..off[2]], keep, &dproj_dlam);
        axpy(&mut g[off[2]..off[3]], keep * dproj_dmu, &rows.t(rec));
        g[off[3]] += keep * dproj_ds2;
        axpy(&mut g[off[4]..], keep, &dproj_dnu);

        if let Some(l) = rec.l {
            let odds = ctx.odds_hat[i].expect("complete record");
            let mu0 = ctx.mu_y0[i].expect("complete record");
            let full = u * odds * (rec.y - mu0) + a * (mu0 - psi);
            if let Some(xpi) = rows.pi(rec) {
                let pi = ctx.pi_hat[i];
                axpy(&mut g[off[0]..off[1]], -w * (1.0 - pi) * (full - projected), &xpi);
            }
            axpy(&mut g[off[1]..off[2]], w * u * (rec.y - mu0) * odds, &rows.p(l, rec.c));
            axpy(&mut g[off[4]..], w * (a - u * odds), &rows.m(0.0, l, rec.c));
        }
        for (s, v) in acc.iter_mut().zip(&g) {
            s.add(*v);
        }
        dpsi.add(-a);
    }
    let n = dataset.n() as f64;
    Ok((acc.iter().map(|s| s.value() / n).collect(), dpsi.value() / n))
}

/// `d/dXi P_n Q`, the mean Jacobian of the stacked nuisance scores.
pub fn score_jacobian(dataset: &Dataset, fits: &NuisanceFits) -> DMatrix<f64> {
    let dims = BlockDims::of(fits);
    let off = dims.offsets();
    let p = dims.total();
    let rows = Rows::new(fits);
    let sigma_l = fits.sigma_l_sq.sqrt();
    let c_dof = dof_factor(fits);
    let imputed = imputation_lookup(dataset, fits);
    let mut h = DMatrix::<f64>::zeros(p, p);
    let add_outer = |h: &mut DMatrix<f64>, r0: usize, c0: usize, alpha: f64, x: &[f64], y: &[f64]| {
        for (a, xa) in x.iter().enumerate() {
            for (b, yb) in y.iter().enumerate() {
                h[(r0 + a, c0 + b)] += alpha * xa * yb;
            }
        }
    };
    for (i, rec) in dataset.iter().enumerate() {
        let pi = fits.pi(rec);
        let xpi = rows.pi(rec);
        if let Some(x) = &xpi {
            add_outer(&mut h, off[0], off[0], -pi * (1.0 - pi), x, x);
        }
        let xt = rows.t(rec);
        let mu = fits.confounder.predict(&rec.with_l(f64::NAN));
        match rec.l {
            Some(l) => {
                let xp = rows.p(l, rec.c);
                let pa = fits.propensity(l, rec.c);
                let w = 1.0 / pi;
                add_outer(&mut h, off[1], off[1], -w * pa * (1.0 - pa), &xp, &xp);
                if let Some(x) = &xpi {
                    add_outer(&mut h, off[1], off[0], -w * (1.0 - pi) * (rec.a_f64() - pa), &xp, x);
                }
                add_outer(&mut h, off[2], off[2], -1.0, &xt, &xt);
                add_outer(&mut h, off[3], off[2], -2.0 * (l - mu), &[1.0], &xt);
                h[(off[3], off[3])] -= c_dof;
                let xm = rows.m(rec.a_f64(), l, rec.c);
                add_outer(&mut h, off[4], off[4], -1.0, &xm, &xm);
            }
            None => {
                let j = imputed[i].expect("missing record has imputations");
                let m = fits.imputations.m as f64;
                let nu_l = rows.l_in_m.map_or(0.0, |k| fits.nu()[k]);
                for k in 0..fits.imputations.m {
                    let zk = fits.imputations.draws(k)[j];
                    let lk = mu + sigma_l * zk;
                    let xm = rows.m(rec.a_f64(), lk, rec.c);
                    let resid = rec.y - dot(fits.nu(), &xm);
                    add_outer(&mut h, off[4], off[4], -1.0 / m, &xm, &xm);
                    // derivative of x (y - x'nu) with respect to the imputed value
                    let mut dl = xm.clone();
                    dl.iter_mut().for_each(|v| *v *= -nu_l);
                    if let Some(pos) = rows.l_in_m {
                        dl[pos] += resid;
                    }
                    add_outer(&mut h, off[4], off[2], 1.0 / m, &dl, &xt);
                    add_outer(&mut h, off[4], off[3], zk / (2.0 * sigma_l * m), &dl, &[1.0]);
                }
            }
        }
    }
    h / dataset.n() as f64
}

/// Variance of the root of `P_n Z = 0` when nuisances solve `P_n Q = 0`:
/// `P_n[V^2] / (P_n dZ/dPsi)^2 / n` with `V = Z - g' H^{-1} Q`.
pub fn sandwich_from_parts(
    z: &[f64],
    dz_dpsi: f64,
    g: &[f64],
    h: &DMatrix<f64>,
    q: &[Vec<f64>],
    dims: Option<&BlockDims>,
) -> Result<f64, EstimationError> {
    let n = z.len();
    let correction: Vec<f64> = if g.is_empty() {
        vec![0.0; n]
    } else {
        // H' c = g gives g' H^{-1} = c'
        let c = h.transpose().lu().solve(&DVector::from_column_slice(g)).ok_or_else(|| singular_block(h, dims))?;
        q.iter().map(|row| dot(c.as_slice(), row)).collect()
    };
    let mut acc = CompensatedSum::new();
    for (zi, ci) in z.iter().zip(&correction) {
        let v = zi - ci;
        acc.add(v * v);
    }
    let meat = acc.value() / n as f64;
    Ok(meat / (dz_dpsi * dz_dpsi) / n as f64)
}

fn singular_block(h: &DMatrix<f64>, dims: Option<&BlockDims>) -> EstimationError {
    if let Some(d) = dims {
        for (name, start, len) in d.names() {
            if len == 0 {
                continue;
            }
            let block = h.view((start, start), (len, len)).clone_owned();
            if block.iter().all(|v| *v == 0.0) || !block.lu().is_invertible() {
                return EstimationError::SingularInformation(name.into());
            }
        }
    }
    EstimationError::SingularInformation("stacked".into())
}

/// Sandwich variance of the doubly robust `Psi_hat`.
pub fn sandwich_variance(dataset: &Dataset, fits: &NuisanceFits, psi_hat: f64) -> Result<VarianceReport, EstimationError> {
    let stack = score_stack(dataset, fits, psi_hat)?;
    let (g, dz) = z_gradient(dataset, fits, psi_hat)?;
    let h = score_jacobian(dataset, fits);
    let var = sandwich_from_parts(&stack.z, dz, &g, &h, &stack.q, Some(&stack.dims))?;
    Ok(VarianceReport { sandwich_var: Some(var), bootstrap_var: None, bootstrap_ci: None, replicates: 0, dropped: 0 })
}

/// Nonparametric bootstrap of an arbitrary statistic. Replicate `b` resamples
/// with its own stream and receives a derived seed for any randomness of its
/// own, so results do not depend on thread scheduling.
pub fn bootstrap_statistic<F>(dataset: &Dataset, b_replicates: usize, seed: u64, statistic: F) -> Result<VarianceReport, EstimationError>
where
    F: Fn(&Dataset, u64) -> Result<f64, EstimationError> + Sync,
{
    if b_replicates < MIN_BOOTSTRAP_REPLICATES {
        return Err(EstimationError::InvalidArgument(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_REPLICATES} replicates, got {b_replicates}"
        )));
    }
    let n = dataset.n();
    let results: Vec<Option<f64>> = (0..b_replicates)
        .into_par_iter()
        .map(|b| {
            let rep_seed = derive_seed(seed, b as u64);
            let mut rng = stream_rng(rep_seed, streams::BOOTSTRAP);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            statistic(&dataset.resample(&idx), rep_seed).ok().filter(|v| v.is_finite())
        })
        .collect();
    let mut values: Vec<f64> = results.iter().flatten().copied().collect();
    let dropped = b_replicates - values.len();
    if dropped as f64 > MAX_DROPPED_FRACTION * b_replicates as f64 || values.len() < 2 {
        return Err(EstimationError::DegenerateBootstrap { dropped, total: b_replicates });
    }
    let var = sample_variance(&values);
    values.sort_by(f64::total_cmp);
    let ci = (quantile_sorted(&values, 0.025), quantile_sorted(&values, 0.975));
    Ok(VarianceReport { sandwich_var: None, bootstrap_var: Some(var), bootstrap_ci: Some(ci), replicates: values.len(), dropped })
}

/// Bootstrap variance of `Psi_hat` for one estimator, refitting every
/// nuisance model on each resample.
pub fn bootstrap(
    dataset: &Dataset,
    estimator: EstimatorKind,
    recipe: &FitRecipe,
    b_replicates: usize,
    seed: u64,
) -> Result<VarianceReport, EstimationError> {
    bootstrap_statistic(dataset, b_replicates, seed, |resample, rep_seed| {
        let recipe = recipe.clone().with_seed(rep_seed);
        let fits = fit_nuisances(resample, &recipe)?;
        let inputs = EstimationInputs { dataset: resample, fits: &fits, oracle: None, m_imputations: recipe.m_imputations, seed: rep_seed };
        Ok(run_estimator(estimator, &inputs)?.psi_hat)
    })
}
