//! Weighted logistic and linear regression.
//!
//! These are the only model-fitting primitives the estimators need: logistic
//! fits for the missingness mechanism and the propensity score, least squares
//! for the confounder and outcome regressions. Logistic fits use damped Newton
//! (IRLS) with step halving; least squares solves the weighted normal
//! equations after a rank check.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{Covariates, Dataset, ObservedRecord};
use crate::numeric::{compensated_sum, expit, log1p_exp};

/// Gradient max-norm (mean weighted log-likelihood scale) for convergence.
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 100;
/// Logit coefficients beyond this are numerically saturated.
pub const SEPARATION_BOUND: f64 = 30.0;
/// Smallest fitted observation probability accepted as an IPW denominator.
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("degenerate response: every response equals {0}")]
    DegenerateResponse(f64),
    #[error("response must be 0 or 1, found {0}")]
    NonBinaryResponse(f64),
    #[error("separation detected: coefficient {index} ({name}) exceeded |{bound}| on the logit scale")]
    Separation { index: usize, name: String, bound: f64 },
    #[error("singular design: columns are linearly dependent")]
    SingularDesign,
    #[error("weights must be finite and positive (record {0})")]
    InvalidWeight(usize),
    #[error("positivity violation: fitted observation probability {value:.3e} below {floor:.0e} at record {index}")]
    PositivityViolation { index: usize, value: f64, floor: f64 },
    #[error("no rows to fit")]
    NoRows,
    #[error("design needs the confounder but record {0} has it missing")]
    MissingConfounder(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// A variable usable as a regressor or response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Column {
    Y,
    A,
    C,
    L,
}

impl Column {
    pub fn name(self) -> &'static str {
        match self {
            Column::Y => "y",
            Column::A => "a",
            Column::C => "c",
            Column::L => "l",
        }
    }

    pub fn value(self, x: &Covariates) -> f64 {
        match self {
            Column::Y => x.y,
            Column::A => x.a,
            Column::C => x.c,
            Column::L => x.l,
        }
    }
}

/// Intercept plus an ordered list of main-effect columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Design {
    columns: Vec<Column>,
}

impl Design {
    pub fn new(columns: Vec<Column>) -> Self {
        Self { columns }
    }

    pub fn intercept_only() -> Self {
        Self { columns: Vec::new() }
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    /// Number of coefficients, intercept included.
    pub fn width(&self) -> usize {
        self.columns.len() + 1
    }

    pub fn uses(&self, col: Column) -> bool {
        self.columns.contains(&col)
    }

    /// Coefficient index of `col` (intercept is 0).
    pub fn position(&self, col: Column) -> Option<usize> {
        self.columns.iter().position(|&c| c == col).map(|i| i + 1)
    }

    pub fn without(&self, col: Column) -> Design {
        Design::new(self.columns.iter().copied().filter(|&c| c != col).collect())
    }

    pub fn fill_row(&self, x: &Covariates, out: &mut [f64]) {
        out[0] = 1.0;
        for (slot, col) in out[1..].iter_mut().zip(&self.columns) {
            *slot = col.value(x);
        }
    }

    pub fn row(&self, x: &Covariates) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        self.fill_row(x, &mut v);
        v
    }

    pub fn names(&self) -> Vec<&'static str> {
        std::iter::once("(intercept)").chain(self.columns.iter().map(|c| c.name())).collect()
    }

    /// Row for a record, requiring the confounder only when the design uses it.
    pub fn record_row(&self, rec: &ObservedRecord) -> Option<Vec<f64>> {
        match rec.l {
            Some(l) => Some(self.row(&rec.with_l(l))),
            None if !self.uses(Column::L) => Some(self.row(&rec.with_l(f64::NAN))),
            None => None,
        }
    }
}

/// Fitted coefficients attached to their design.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub design: Design,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn new(design: Design, coefficients: Vec<f64>) -> Self {
        assert_eq!(design.width(), coefficients.len(), "coefficient length must match design");
        Self { design, coefficients }
    }

    pub fn predict(&self, x: &Covariates) -> f64 {
        let mut acc = self.coefficients[0];
        for (col, b) in self.design.columns.iter().zip(&self.coefficients[1..]) {
            acc += b * col.value(x);
        }
        acc
    }

    /// Linear predictor as `offset + slope * l`, the part free of the
    /// confounder and its coefficient (zero when the design omits it).
    pub fn split_confounder(&self, x: &Covariates) -> (f64, f64) {
        let mut offset = self.coefficients[0];
        let mut slope = 0.0;
        for (col, b) in self.design.columns.iter().zip(&self.coefficients[1..]) {
            if *col == Column::L {
                slope += b;
            } else {
                offset += b * col.value(x);
            }
        }
        (offset, slope)
    }

    pub fn coefficient(&self, col: Column) -> f64 {
        self.design.position(col).map_or(0.0, |i| self.coefficients[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Intercept first, then the design's columns in order.
    pub coefficients: Vec<f64>,
    pub residual_variance: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

/// Row-major regressor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn with_columns(ncols: usize) -> Self {
        Self { nrows: 0, ncols, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        let mut m = Self::with_columns(ncols);
        for r in rows {
            m.push_row(r);
        }
        m
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.ncols, "row width mismatch");
        self.data.extend_from_slice(row);
        self.nrows += 1;
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }
}

/// Response, regressors and optional weights for one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub response: Column,
    pub design: Design,
    pub weights: Option<Vec<f64>>,
}

impl DesignSpec {
    pub fn new(response: Column, design: Design) -> Self {
        Self { response, design, weights: None }
    }

    pub fn weighted(mut self, weights: Vec<f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    /// Regressors and response for every record; the response may be the
    /// confounder, in which case records must be complete.
    pub fn build(&self, records: &[ObservedRecord]) -> Result<(DesignMatrix, Vec<f64>), GlmError> {
        let needs_l = self.design.uses(Column::L) || self.response == Column::L;
        let mut x = DesignMatrix::with_columns(self.design.width());
        let mut y = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let cov = match rec.l {
                Some(l) => rec.with_l(l),
                None if !needs_l => rec.with_l(f64::NAN),
                None => return Err(GlmError::MissingConfounder(i)),
            };
            x.push_row(&self.design.row(&cov));
            y.push(self.response.value(&cov));
        }
        Ok((x, y))
    }
}

fn check_weights(n: usize, weights: Option<&[f64]>) -> Result<(), GlmError> {
    if let Some(w) = weights {
        if w.len() != n {
            return Err(GlmError::Dimension(format!("{} weights for {} rows", w.len(), n)));
        }
        if let Some(i) = w.iter().position(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(GlmError::InvalidWeight(i));
        }
    }
    Ok(())
}

fn weight(weights: Option<&[f64]>, i: usize) -> f64 {
    weights.map_or(1.0, |w| w[i])
}

fn logistic_loglik(x: &DesignMatrix, y: &[f64], w: Option<&[f64]>, beta: &[f64]) -> f64 {
    compensated_sum((0..x.nrows()).map(|i| {
        let eta = dot(x.row(i), beta);
        weight(w, i) * (y[i] * eta - log1p_exp(eta))
    }))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximum-likelihood logistic regression, intercept column included in `x`.
pub fn fit_logistic(x: &DesignMatrix, y: &[f64], weights: Option<&[f64]>) -> Result<FitResult, GlmError> {
    let n = x.nrows();
    let k = x.ncols();
    if n == 0 {
        return Err(GlmError::NoRows);
    }
    if y.len() != n {
        return Err(GlmError::Dimension(format!("{} responses for {} rows", y.len(), n)));
    }
    check_weights(n, weights)?;
    if let Some(&bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(GlmError::NonBinaryResponse(bad));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(GlmError::DegenerateResponse(y[0]));
    }
    let total_weight = compensated_sum((0..n).map(|i| weight(weights, i)));

    let mut beta = vec![0.0; k];
    let mut ll = logistic_loglik(x, y, weights, &beta);
    let mut grad = vec![0.0; k];
    let mut info = vec![0.0; k * k];
    for iter in 0..=MAX_ITERATIONS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        info.iter_mut().for_each(|v| *v = 0.0);
        for (i, &yi) in y.iter().enumerate().take(n) {
            let row = x.row(i);
            let p = expit(dot(row, &beta));
            let wi = weight(weights, i);
            let resid = wi * (yi - p);
            let curv = wi * p * (1.0 - p);
            for (a, (g, &ra)) in grad.iter_mut().zip(row).enumerate() {
                *g += resid * ra;
                for (cell, &rb) in info[a * k..=a * k + a].iter_mut().zip(row) {
                    *cell += curv * ra * rb;
                }
            }
        }
        let grad_norm = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs())) / total_weight;
        let step = solve_spd(&info, &grad, k).ok_or(GlmError::SingularDesign)?;
        // Under separation the gradient vanishes while Newton steps stay O(1),
        // so both must be small.
        let step_norm = step.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
        if grad_norm <= GRADIENT_TOLERANCE && step_norm <= 1e-6 {
            return Ok(FitResult {
                coefficients: beta,
                residual_variance: None,
                converged: true,
                iterations: iter,
                log_likelihood: ll,
            });
        }
        if iter == MAX_ITERATIONS {
            break;
        }
        // step halving until the likelihood does not decrease
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            if let Some((j, _)) = trial.iter().enumerate().find(|(_, b)| b.abs() > SEPARATION_BOUND) {
                return Err(GlmError::Separation { index: j, name: format!("x{j}"), bound: SEPARATION_BOUND });
            }
            let trial_ll = logistic_loglik(x, y, weights, &trial);
            if trial_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(FitResult {
        coefficients: beta,
        residual_variance: None,
        converged: false,
        iterations: MAX_ITERATIONS,
        log_likelihood: ll,
    })
}

/// Solve `M x = b` for a symmetric positive-definite `M` given by its lower triangle.
fn solve_spd(lower: &[f64], b: &[f64], k: usize) -> Option<Vec<f64>> {
    let m = DMatrix::from_fn(k, k, |i, j| if i >= j { lower[i * k + j] } else { lower[j * k + i] });
    if !full_rank(&m) {
        return None;
    }
    let chol = m.cholesky()?;
    Some(chol.solve(&DVector::from_column_slice(b)).as_slice().to_vec())
}

fn full_rank(m: &DMatrix<f64>) -> bool {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    max > 0.0 && min > 1e-12 * max
}

/// Accumulated weighted normal equations `X'WX`, `X'Wy`, `y'Wy`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    k: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
    total_weight: f64,
    rows: usize,
}

impl NormalEquations {
    pub fn new(k: usize) -> Self {
        Self { k, xtx: vec![0.0; k * k], xty: vec![0.0; k], yty: 0.0, total_weight: 0.0, rows: 0 }
    }

    pub fn add(&mut self, row: &[f64], y: f64, w: f64) {
        let k = self.k;
        for (a, (xty, &ra)) in self.xty.iter_mut().zip(row).enumerate() {
            let wa = w * ra;
            *xty += wa * y;
            for (cell, &rb) in self.xtx[a * k..=a * k + a].iter_mut().zip(row) {
                *cell += wa * rb;
            }
        }
        self.yty += w * y * y;
        self.total_weight += w;
        self.rows += 1;
    }

    pub fn solve(&self) -> Result<FitResult, GlmError> {
        let k = self.k;
        if self.rows == 0 {
            return Err(GlmError::NoRows);
        }
        let beta = solve_spd(&self.xtx, &self.xty, k).ok_or(GlmError::SingularDesign)?;
        // RSS = y'Wy - 2 b'X'Wy + b'X'WX b
        let mut quad = 0.0;
        for a in 0..k {
            for b in 0..k {
                let m = if a >= b { self.xtx[a * k + b] } else { self.xtx[b * k + a] };
                quad += beta[a] * m * beta[b];
            }
        }
        let rss = (self.yty - 2.0 * dot(&beta, &self.xty) + quad).max(0.0);
        let dof = self.total_weight - k as f64;
        let residual_variance = if dof > 0.0 { rss / dof } else { 0.0 };
        let mle_var = rss / self.total_weight;
        let log_likelihood = if mle_var > 0.0 {
            -0.5 * self.total_weight * ((2.0 * std::f64::consts::PI * mle_var).ln() + 1.0)
        } else {
            f64::INFINITY
        };
        Ok(FitResult { coefficients: beta, residual_variance: Some(residual_variance), converged: true, iterations: 1, log_likelihood })
    }
}

/// Weighted least squares; `residual_variance = RSS / (sum(w) - k)`.
pub fn fit_linear(x: &DesignMatrix, y: &[f64], weights: Option<&[f64]>) -> Result<FitResult, GlmError> {
    let n = x.nrows();
    if n == 0 {
        return Err(GlmError::NoRows);
    }
    if y.len() != n {
        return Err(GlmError::Dimension(format!("{} responses for {} rows", y.len(), n)));
    }
    check_weights(n, weights)?;
    let mut ne = NormalEquations::new(x.ncols());
    for (i, &yi) in y.iter().enumerate().take(n) {
        ne.add(x.row(i), yi, weight(weights, i));
    }
    // Recompute RSS directly: the expanded form loses precision on exact fits.
    let mut fit = ne.solve()?;
    let rss = compensated_sum((0..n).map(|i| {
        let e = y[i] - dot(x.row(i), &fit.coefficients);
        weight(weights, i) * e * e
    }));
    let dof = ne.total_weight - x.ncols() as f64;
    fit.residual_variance = Some(if dof > 0.0 { rss / dof } else { 0.0 });
    Ok(fit)
}

/// Fit a spec (logistic or linear chosen by the caller) on the given records.
pub fn fit_spec_logistic(spec: &DesignSpec, records: &[ObservedRecord]) -> Result<LinearModel, GlmError> {
    let (x, y) = spec.build(records)?;
    let fit = fit_logistic(&x, &y, spec.weights.as_deref())?;
    Ok(LinearModel::new(spec.design.clone(), fit.coefficients))
}

/// Fitted model for pr(R = 1 | A, C, Y).
#[derive(Debug, Clone, PartialEq)]
pub enum MissingnessModel {
    Logistic(LinearModel),
    /// No record is missing the confounder; π ≡ 1.
    AlwaysObserved,
}

impl MissingnessModel {
    pub fn prob(&self, rec: &ObservedRecord) -> f64 {
        match self {
            MissingnessModel::Logistic(m) => expit(m.predict(&rec.with_l(f64::NAN))),
            MissingnessModel::AlwaysObserved => 1.0,
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        match self {
            MissingnessModel::Logistic(m) => &m.coefficients,
            MissingnessModel::AlwaysObserved => &[],
        }
    }
}

/// Logistic regression of R on `design` over all records, or π ≡ 1 when
/// nothing is missing.
pub fn fit_missingness(dataset: &Dataset, design: &Design) -> Result<(MissingnessModel, FitResult), GlmError> {
    if design.uses(Column::L) {
        return Err(GlmError::Dimension("missingness model cannot use the confounder".into()));
    }
    if dataset.all_observed() {
        let fit = FitResult { coefficients: vec![], residual_variance: None, converged: true, iterations: 0, log_likelihood: 0.0 };
        return Ok((MissingnessModel::AlwaysObserved, fit));
    }
    let mut x = DesignMatrix::with_columns(design.width());
    let mut y = Vec::with_capacity(dataset.n());
    for rec in dataset {
        x.push_row(&design.row(&rec.with_l(f64::NAN)));
        y.push(f64::from(rec.r));
    }
    let fit = fit_logistic(&x, &y, None)?;
    Ok((MissingnessModel::Logistic(LinearModel::new(design.clone(), fit.coefficients.clone())), fit))
}

/// Inverse-probability-of-observation weights 1/π̂ for the complete cases, in order.
pub fn ipw_weights(dataset: &Dataset, pi: &MissingnessModel) -> Result<Vec<f64>, GlmError> {
    let mut w = Vec::with_capacity(dataset.n_complete());
    for (i, rec) in dataset.iter().enumerate() {
        if !rec.is_complete() {
            continue;
        }
        let p = pi.prob(rec);
        if p.is_nan() || p < WEIGHT_FLOOR {
            return Err(GlmError::PositivityViolation { index: i, value: p, floor: WEIGHT_FLOOR });
        }
        w.push(1.0 / p);
    }
    Ok(w)
}

/// Logistic regression of `response` on `design` among complete cases,
/// weighted by 1/π̂.
pub fn fit_ipw_logistic(
    dataset: &Dataset,
    pi: &MissingnessModel,
    response: Column,
    design: &Design,
) -> Result<(LinearModel, FitResult), GlmError> {
    let weights = ipw_weights(dataset, pi)?;
    let cc: Vec<ObservedRecord> = dataset.iter().filter(|r| r.is_complete()).copied().collect();
    let spec = DesignSpec::new(response, design.clone());
    let (x, y) = spec.build(&cc)?;
    let fit = fit_logistic(&x, &y, Some(&weights))?;
    Ok((LinearModel::new(design.clone(), fit.coefficients.clone()), fit))
}

/// h(C) = pr(A = 1 | L = 0, C): the propensity model evaluated at the
/// reference confounder value.
pub fn baseline_propensity(propensity: &LinearModel, c: f64) -> f64 {
    expit(propensity.predict(&Covariates { y: f64::NAN, a: f64::NAN, c, l: 0.0 }))
}
