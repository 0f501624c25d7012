//! Observed-data likelihood under the odds-ratio parametrization with
//! Gaussian baselines, and its direct maximization.
//!
//! Families: `L | A = 0, C ~ N(alpha0 + alpha1 C, sigma_j^2)`,
//! `Y | A, L = 0, C ~ N(theta0 + theta1 A + theta2 C, sigma_r^2)`,
//! `log w(Y, L) = omega L Y` and `log chi(A, L | C) = beta A L`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::OddsRatioError;
use crate::data::{Dataset, ObservedRecord};
use crate::numeric::{expit, normal_log_pdf, CompensatedSum, GaussHermite};
use crate::rng::{stream_rng, streams};
use crate::sim::DgpParams;

pub const PARAMETER_NAMES: [&str; 9] =
    ["alpha0", "alpha1", "log_sigma_j_sq", "omega", "beta", "theta_r0", "theta_r1", "theta_r2", "log_sigma_r_sq"];

const MAX_ITERATIONS: usize = 500;
const GRADIENT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReparamParams {
    pub alpha: [f64; 2],
    pub log_sigma_j_sq: f64,
    pub omega: f64,
    pub beta: f64,
    pub theta_r: [f64; 3],
    pub log_sigma_r_sq: f64,
}

impl ReparamParams {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.alpha[0],
            self.alpha[1],
            self.log_sigma_j_sq,
            self.omega,
            self.beta,
            self.theta_r[0],
            self.theta_r[1],
            self.theta_r[2],
            self.log_sigma_r_sq,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            alpha: [v[0], v[1]],
            log_sigma_j_sq: v[2],
            omega: v[3],
            beta: v[4],
            theta_r: [v[5], v[6], v[7]],
            log_sigma_r_sq: v[8],
        }
    }

    /// The same law as a jointly Gaussian `(Y, L) | A, C` process.
    pub fn from_gaussian(p: &DgpParams) -> Self {
        let nu = p.nu();
        let s_r = p.outcome_residual_variance();
        Self {
            alpha: [p.alpha[0], p.alpha[2]],
            log_sigma_j_sq: p.sigma_l_sq.ln(),
            omega: nu[2] / s_r,
            beta: p.alpha[1] / p.sigma_l_sq,
            theta_r: [nu[0], nu[1], nu[3]],
            log_sigma_r_sq: s_r.ln(),
        }
    }

    pub fn sigma_j_sq(&self) -> f64 {
        self.log_sigma_j_sq.exp()
    }

    pub fn sigma_r_sq(&self) -> f64 {
        self.log_sigma_r_sq.exp()
    }

    fn mean_j(&self, c: f64) -> f64 {
        self.alpha[0] + self.alpha[1] * c
    }

    fn mean_r(&self, a: f64, c: f64) -> f64 {
        self.theta_r[0] + self.theta_r[1] * a + self.theta_r[2] * c
    }

    /// Mean of `L` given `(a, c)` after tilting the baseline by `chi`.
    pub fn confounder_mean(&self, a: f64, c: f64) -> f64 {
        self.mean_j(c) + self.beta * a * self.sigma_j_sq()
    }

    /// `log f(l, y | a, c)` assembled from the four components:
    /// `log w + log r + log j + log chi - log int w r dy - log int chi j dl`.
    pub fn log_joint(&self, y: f64, l: f64, a: f64, c: f64) -> f64 {
        let (sj, sr) = (self.sigma_j_sq(), self.sigma_r_sq());
        let (mj, mr) = (self.mean_j(c), self.mean_r(a, c));
        let log_y_mix = self.omega * l * mr + 0.5 * self.omega * self.omega * l * l * sr;
        let log_l_mix = self.beta * a * mj + 0.5 * self.beta * self.beta * a * a * sj;
        self.omega * l * y + normal_log_pdf(y, mr, sr) + normal_log_pdf(l, mj, sj) + self.beta * a * l
            - log_y_mix
            - log_l_mix
    }
}

/// How the confounder is integrated out for records with `L` missing.
#[derive(Debug, Clone, PartialEq)]
pub enum LIntegration {
    /// Gauss-Hermite of the given order, centred and scaled on `L | A, C`.
    GaussHermite(usize),
    /// Sum over a finite support.
    Support(Vec<f64>),
}

enum Rule {
    Gh(GaussHermite),
    Support(Vec<f64>),
}

impl Rule {
    fn new(integration: &LIntegration) -> Self {
        match integration {
            LIntegration::GaussHermite(order) => Rule::Gh(GaussHermite::new(*order)),
            LIntegration::Support(v) => Rule::Support(v.clone()),
        }
    }

    fn log_marginal(&self, params: &ReparamParams, y: f64, a: f64, c: f64) -> f64 {
        match self {
            Rule::Gh(gh) => {
                let center = params.confounder_mean(a, c);
                let scale = params.sigma_j_sq().sqrt();
                let (nodes, weights) = gh.grid(center, scale);
                let logs: Vec<f64> = nodes.iter().map(|&l| params.log_joint(y, l, a, c)).collect();
                log_sum_exp_weighted(&logs, &weights)
            }
            Rule::Support(ls) => {
                let logs: Vec<f64> = ls.iter().map(|&l| params.log_joint(y, l, a, c)).collect();
                log_sum_exp_weighted(&logs, &vec![1.0; ls.len()])
            }
        }
    }
}

fn log_sum_exp_weighted(logs: &[f64], weights: &[f64]) -> f64 {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = logs.iter().zip(weights).map(|(v, w)| w * (v - m).exp()).sum();
    m + s.ln()
}

fn record_loglik(rule: &Rule, params: &ReparamParams, rec: &ObservedRecord) -> f64 {
    let a = rec.a_f64();
    match rec.l {
        Some(l) => params.log_joint(rec.y, l, a, rec.c),
        None => rule.log_marginal(params, rec.y, a, rec.c),
    }
}

/// `sum_i R_i log f(Y_i, L_i | A_i, C_i) + (1 - R_i) log int f(Y_i, l | A_i, C_i) dl`.
pub fn observed_loglik(
    params: &ReparamParams,
    dataset: &Dataset,
    integration: &LIntegration,
) -> Result<f64, OddsRatioError> {
    let rule = Rule::new(integration);
    loglik_with(&rule, params, dataset)
}

fn loglik_with(rule: &Rule, params: &ReparamParams, dataset: &Dataset) -> Result<f64, OddsRatioError> {
    let terms: Vec<f64> = dataset.records().par_iter().map(|rec| record_loglik(rule, params, rec)).collect();
    let mut acc = CompensatedSum::new();
    for (index, v) in terms.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(OddsRatioError::NonFiniteLikelihood { index });
        }
        acc.add(v);
    }
    Ok(acc.value())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReparamFit {
    pub params: ReparamParams,
    /// Standard errors from the inverse observed information, in
    /// `PARAMETER_NAMES` order; `NaN` for parameters held fixed.
    pub se: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    /// Max-norm of the gradient of the mean log-likelihood at the optimum.
    pub grad_norm: f64,
}

/// Maximize the observed-data log-likelihood over all nine parameters.
pub fn fit_reparam_mle(dataset: &Dataset, init: &ReparamParams, order: usize) -> Result<ReparamFit, OddsRatioError> {
    fit_reparam_mle_with(dataset, init, &LIntegration::GaussHermite(order), &[true; 9])
}

/// BFGS on the mean negative log-likelihood with central-difference
/// gradients; parameters with `free[k] == false` stay at their initial value.
pub fn fit_reparam_mle_with(
    dataset: &Dataset,
    init: &ReparamParams,
    integration: &LIntegration,
    free: &[bool; 9],
) -> Result<ReparamFit, OddsRatioError> {
    if dataset.is_empty() {
        return Err(OddsRatioError::InvalidInput("empty dataset".into()));
    }
    let rule = Rule::new(integration);
    let n = dataset.n() as f64;
    let full0 = init.to_vec();
    let idx: Vec<usize> = (0..9).filter(|&k| free[k]).collect();
    let expand = |x: &[f64]| {
        let mut v = full0.clone();
        for (j, &k) in idx.iter().enumerate() {
            v[k] = x[j];
        }
        v
    };
    let objective = |x: &[f64]| -> Result<f64, OddsRatioError> {
        Ok(-loglik_with(&rule, &ReparamParams::from_slice(&expand(x)), dataset)? / n)
    };
    objective(&idx.iter().map(|&k| full0[k]).collect::<Vec<_>>())?;
    let safe = |x: &[f64]| objective(x).unwrap_or(f64::INFINITY);

    let x0: Vec<f64> = idx.iter().map(|&k| full0[k]).collect();
    let (x, iterations, grad_norm) = bfgs(&safe, x0)?;
    let full = expand(&x);
    let params = ReparamParams::from_slice(&full);
    let loglik = loglik_with(&rule, &params, dataset)?;

    let hess = fd_hessian(&safe, &x);
    let mut se = vec![f64::NAN; 9];
    if let Some(inv) = nalgebra::DMatrix::from_row_slice(x.len(), x.len(), &hess).try_inverse() {
        for (j, &k) in idx.iter().enumerate() {
            se[k] = (inv[(j, j)] / n).sqrt();
        }
    }
    Ok(ReparamFit { params, se, loglik, iterations, grad_norm })
}

fn fd_gradient(f: &impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|k| {
            let h = 1e-6 * x[k].abs().max(1.0);
            xp[k] = x[k] + h;
            let up = f(&xp);
            xp[k] = x[k] - h;
            let down = f(&xp);
            xp[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn fd_hessian(f: &impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let p = x.len();
    let mut h = vec![0.0; p * p];
    let mut xp = x.to_vec();
    for k in 0..p {
        let e = 1e-4 * x[k].abs().max(1.0);
        xp[k] = x[k] + e;
        let gu = fd_gradient(f, &xp);
        xp[k] = x[k] - e;
        let gd = fd_gradient(f, &xp);
        xp[k] = x[k];
        for j in 0..p {
            h[j * p + k] = (gu[j] - gd[j]) / (2.0 * e);
        }
    }
    for j in 0..p {
        for k in 0..j {
            let s = 0.5 * (h[j * p + k] + h[k * p + j]);
            h[j * p + k] = s;
            h[k * p + j] = s;
        }
    }
    h
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Quasi-Newton minimization with an Armijo backtracking line search.
fn bfgs(f: &impl Fn(&[f64]) -> f64, mut x: Vec<f64>) -> Result<(Vec<f64>, usize, f64), OddsRatioError> {
    let p = x.len();
    let mut inv_h = vec![0.0; p * p];
    for k in 0..p {
        inv_h[k * p + k] = 1.0;
    }
    let mut fx = f(&x);
    let mut g = fd_gradient(f, &x);
    let mut trace = vec![fx];
    for iter in 0..MAX_ITERATIONS {
        let gn = max_norm(&g);
        if gn <= GRADIENT_TOLERANCE {
            return Ok((x, iter, gn));
        }
        let mut d: Vec<f64> = (0..p).map(|i| -(0..p).map(|j| inv_h[i * p + j] * g[j]).sum::<f64>()).collect();
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            // not a descent direction: restart from steepest descent
            for v in inv_h.iter_mut() {
                *v = 0.0;
            }
            for k in 0..p {
                inv_h[k * p + k] = 1.0;
            }
            d = g.iter().map(|v| -v).collect();
            slope = -g.iter().map(|v| v * v).sum::<f64>();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let fnew = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // line search stalled; accept if already at numerical precision
            if gn <= 10.0 * GRADIENT_TOLERANCE {
                return Ok((x, iter, gn));
            }
            return Err(OddsRatioError::NonConvergence { iterations: iter, grad_norm: gn, trace });
        };
        let gnew = fd_gradient(f, &xn);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let hy: Vec<f64> = (0..p).map(|i| (0..p).map(|j| inv_h[i * p + j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let rho = 1.0 / sy;
            for i in 0..p {
                for j in 0..p {
                    inv_h[i * p + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }
        x = xn;
        fx = fnew;
        g = gnew;
        trace.push(fx);
    }
    Err(OddsRatioError::NonConvergence { iterations: MAX_ITERATIONS, grad_norm: max_norm(&g), trace })
}

/// Draw `n` records from the family with `logit pr(A = 1 | C) = zeta0 + zeta1 C`
/// and `logit pr(R = 1 | A, C, Y) = eta . (1, A, C, Y)`.
///
/// The likelihood conditions on `(A, C)`, so the law of `A` given `C` is free.
pub fn sample_reparam(params: &ReparamParams, zeta: [f64; 2], eta: [f64; 4], n: usize, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, streams::DATA);
    let (sj, sr) = (params.sigma_j_sq(), params.sigma_r_sq());
    let records = (0..n)
        .map(|_| {
            let c = rng.sample::<f64, _>(StandardNormal) + rng.random_range(-1.0..1.0);
            let a = u8::from(rng.random::<f64>() < expit(zeta[0] + zeta[1] * c));
            let af = f64::from(a);
            let l = params.confounder_mean(af, c) + sj.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let y = params.mean_r(af, c) + params.omega * sr * l + sr.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let r = rng.random::<f64>() < expit(eta[0] + eta[1] * af + eta[2] * c + eta[3] * y);
            if r { ObservedRecord::complete(y, a, c, l) } else { ObservedRecord::missing(y, a, c) }
        })
        .collect();
    Dataset::new(records)
}
