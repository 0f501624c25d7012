//! Odds-ratio parametrization of the joint law of `(L, Y)` given `(A, C)`.
//!
//! The joint is rebuilt from four variation-independent pieces: the odds
//! ratio of `L` and `Y` given `(A, C)`, the odds ratio of `A` and `L` given
//! `C`, the baseline density `f(L | a0, C)` and the baseline density
//! `f(Y | l0, A, C)`. Reference values are `a0 = l0 = y0 = 0`.

mod compat;
mod reparam;

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

pub use compat::{incompatibility_gap, normal_pair_gap, IncompatibilityReport, LogisticConfounder, NormalPair};
pub use reparam::{
    fit_reparam_mle, fit_reparam_mle_with, observed_loglik, sample_reparam, LIntegration, ReparamFit, ReparamParams,
    PARAMETER_NAMES,
};

use crate::numeric::GaussHermite;
use crate::rng::{stream_rng, streams};

/// Reference values `(a0, l0, y0)`.
pub const REFERENCE: (f64, f64, f64) = (0.0, 0.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OddsRatioError {
    #[error("odds ratio undefined: table cell ({row}, {col}) is not strictly positive")]
    UndefinedOddsRatio { row: usize, col: usize },
    #[error("normalizer is not finite at a = {a}, c = {c}")]
    DivergentNormalizer { a: f64, c: f64 },
    #[error("log-likelihood is not finite at record {index}")]
    NonFiniteLikelihood { index: usize },
    #[error("optimizer did not converge after {iterations} iterations (gradient max-norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64, trace: Vec<f64> },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

type LogAssociation = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;

/// Conditional odds-ratio function of `(x1, x2)` given conditioning values.
///
/// Built from any log-association `g`; evaluation forms the cross ratio
/// `exp(g(x1, x2) - g(x1, r2) - g(r1, x2) + g(r1, r2))`, so the result is 1
/// whenever either argument sits at its reference.
#[derive(Clone)]
pub struct OddsRatioFn {
    log_assoc: LogAssociation,
    reference: (f64, f64),
}

impl std::fmt::Debug for OddsRatioFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OddsRatioFn").field("reference", &self.reference).finish_non_exhaustive()
    }
}

impl OddsRatioFn {
    pub fn new(reference: (f64, f64), log_assoc: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { log_assoc: Arc::new(log_assoc), reference }
    }

    /// No association.
    pub fn identity() -> Self {
        Self::new((0.0, 0.0), |_, _, _| 0.0)
    }

    /// `exp(coef (x1 - r1)(x2 - r2))`, the Gaussian-copula form.
    pub fn log_bilinear(coef: f64, reference: (f64, f64)) -> Self {
        Self::new(reference, move |x1, x2, _| coef * (x1 - reference.0) * (x2 - reference.1))
    }

    pub fn reference(&self) -> (f64, f64) {
        self.reference
    }

    pub fn log_eval(&self, x1: f64, x2: f64, cond: &[f64]) -> f64 {
        let (r1, r2) = self.reference;
        let g = &self.log_assoc;
        g(x1, x2, cond) - g(x1, r2, cond) - g(r1, x2, cond) + g(r1, r2, cond)
    }

    pub fn eval(&self, x1: f64, x2: f64, cond: &[f64]) -> f64 {
        self.log_eval(x1, x2, cond).exp()
    }
}

/// Probability table over a finite grid of `(x1, x2)` values for one
/// conditioning cell. Rows index `x1`, columns `x2`. Any positive scaling
/// of a joint or of either conditional gives the same odds ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct Table2 {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub p: Vec<Vec<f64>>,
}

impl Table2 {
    pub fn new(x1: Vec<f64>, x2: Vec<f64>, p: Vec<Vec<f64>>) -> Result<Self, OddsRatioError> {
        if p.len() != x1.len() || p.iter().any(|r| r.len() != x2.len()) {
            return Err(OddsRatioError::InvalidInput("table shape does not match its supports".into()));
        }
        Ok(Self { x1, x2, p })
    }

    /// Rows rescaled to sum to one: the conditional of `x2` given `x1`.
    pub fn row_conditional(&self) -> Self {
        let p = self.p.iter().map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        });
        Self { p: p.collect(), ..self.clone() }
    }

    /// Columns rescaled to sum to one: the conditional of `x1` given `x2`.
    pub fn column_conditional(&self) -> Self {
        let sums: Vec<f64> = (0..self.x2.len()).map(|j| self.p.iter().map(|r| r[j]).sum()).collect();
        let p = self.p.iter().map(|r| r.iter().zip(&sums).map(|(v, s)| v / s).collect());
        Self { p: p.collect(), ..self.clone() }
    }
}

fn index_of(values: &[f64], x: f64) -> Option<usize> {
    values.iter().position(|v| *v == x)
}

/// Cross-product-ratio odds ratio of a table, normalized at the reference
/// pair of support values. Values off the support evaluate to `NaN`.
pub fn odds_ratio_from_table(table: &Table2, reference: (f64, f64)) -> Result<OddsRatioFn, OddsRatioError> {
    for (i, row) in table.p.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(OddsRatioError::UndefinedOddsRatio { row: i, col: j });
            }
        }
    }
    if index_of(&table.x1, reference.0).is_none() || index_of(&table.x2, reference.1).is_none() {
        return Err(OddsRatioError::InvalidInput("reference pair is not on the table support".into()));
    }
    let log_p: Vec<Vec<f64>> = table.p.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect();
    let (x1, x2) = (table.x1.clone(), table.x2.clone());
    Ok(OddsRatioFn::new(reference, move |a, b, _| match (index_of(&x1, a), index_of(&x2, b)) {
        (Some(i), Some(j)) => log_p[i][j],
        _ => f64::NAN,
    }))
}

/// Support points with integration weights: unit weights for a discrete
/// support, quadrature weights for a continuous one.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Grid {
    pub fn discrete(values: Vec<f64>) -> Self {
        let weights = vec![1.0; values.len()];
        Self { nodes: values, weights }
    }

    /// Gauss-Hermite nodes for Lebesgue integrals of functions concentrated
    /// around `center` with spread `scale`.
    pub fn gauss_hermite(order: usize, center: f64, scale: f64) -> Self {
        let (nodes, weights) = GaussHermite::new(order).grid(center, scale);
        Self { nodes, weights }
    }

    /// `n` equally spaced midpoints of `[lo, hi]`, each weighted by the spacing.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Self {
        let h = (hi - lo) / n as f64;
        let nodes = (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect();
        Self { nodes, weights: vec![h; n] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

type BaselineL = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type BaselineY = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// The four variation-independent components plus the `(l, y)` support.
#[derive(Clone)]
pub struct Factorization {
    /// Odds ratio of `(l, y)` given `[a, c]`.
    pub chi_ly: OddsRatioFn,
    /// Odds ratio of `(a, l)` given `[c]`.
    pub chi_al: OddsRatioFn,
    /// `f(l | a0, c)` as a function of `(l, c)`.
    pub baseline_l: BaselineL,
    /// `f(y | l0, a, c)` as a function of `(y, a, c)`.
    pub baseline_y: BaselineY,
    pub l_grid: Grid,
    pub y_grid: Grid,
}

impl Factorization {
    pub fn new(
        chi_ly: OddsRatioFn,
        chi_al: OddsRatioFn,
        baseline_l: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        baseline_y: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        l_grid: Grid,
        y_grid: Grid,
    ) -> Self {
        Self { chi_ly, chi_al, baseline_l: Arc::new(baseline_l), baseline_y: Arc::new(baseline_y), l_grid, y_grid }
    }

    /// `int chi(l, y | a, c) f(y | l0, a, c) dy` for one `l`.
    fn y_mixing(&self, l: f64, a: f64, c: f64) -> f64 {
        let cond = [a, c];
        self.y_grid
            .nodes
            .iter()
            .zip(&self.y_grid.weights)
            .map(|(&y, w)| w * self.chi_ly.eval(l, y, &cond) * (self.baseline_y)(y, a, c))
            .sum()
    }

    /// `f(l | y0, a, c) / f(l0 | y0, a, c)` in terms of the components.
    fn l_ratio_at_y0(&self, l: f64, a: f64, c: f64) -> f64 {
        let l0 = REFERENCE.1;
        self.chi_al.eval(a, l, &[c]) * (self.baseline_l)(l, c) / ((self.baseline_l)(l0, c) * self.y_mixing(l, a, c))
    }
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("l_grid", &self.l_grid).field("y_grid", &self.y_grid).finish_non_exhaustive()
    }
}

/// `K(a, c) = [f(l0 | y0, a, c)]^{-1} int int chi(l, y | a, c) f(l | y0, a, c) f(y | l0, a, c)`.
pub fn normalizer_k(fact: &Factorization, a: f64, c: f64) -> Result<f64, OddsRatioError> {
    let cond = [a, c];
    let mut k = 0.0;
    for (&l, wl) in fact.l_grid.nodes.iter().zip(&fact.l_grid.weights) {
        let ratio = fact.l_ratio_at_y0(l, a, c);
        for (&y, wy) in fact.y_grid.nodes.iter().zip(&fact.y_grid.weights) {
            k += wl * wy * fact.chi_ly.eval(l, y, &cond) * ratio * (fact.baseline_y)(y, a, c);
        }
    }
    if k.is_finite() && k > 0.0 {
        Ok(k)
    } else {
        Err(OddsRatioError::DivergentNormalizer { a, c })
    }
}

/// Conditional density of `(L, Y)` given one `(a, c)` cell, on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGrid {
    pub l: Vec<f64>,
    pub y: Vec<f64>,
    /// `density[i][j]` at `(l[i], y[j])`.
    pub density: Vec<Vec<f64>>,
    pub l_weights: Vec<f64>,
    pub y_weights: Vec<f64>,
}

impl JointGrid {
    /// Integral (or sum) of the density over the grid.
    pub fn total(&self) -> f64 {
        self.density
            .iter()
            .zip(&self.l_weights)
            .map(|(row, wl)| wl * row.iter().zip(&self.y_weights).map(|(d, wy)| d * wy).sum::<f64>())
            .sum()
    }
}

/// The product formula
/// `f = chi(L,Y|A,C) f(Y|l0,A,C) / K(A,C) * f(L|a0,C) chi(A,L|C) / (f(l0|a0,C) int chi(L,y|A,C) f(y|l0,A,C) dy)`.
pub fn reconstruct_joint(fact: &Factorization, a: f64, c: f64) -> Result<JointGrid, OddsRatioError> {
    let k = normalizer_k(fact, a, c)?;
    let cond = [a, c];
    let l0 = REFERENCE.1;
    let base_l0 = (fact.baseline_l)(l0, c);
    let density = fact
        .l_grid
        .nodes
        .iter()
        .map(|&l| {
            let l_part = (fact.baseline_l)(l, c) * fact.chi_al.eval(a, l, &[c]) / (base_l0 * fact.y_mixing(l, a, c));
            fact.y_grid
                .nodes
                .iter()
                .map(|&y| fact.chi_ly.eval(l, y, &cond) * (fact.baseline_y)(y, a, c) / k * l_part)
                .collect()
        })
        .collect();
    Ok(JointGrid {
        l: fact.l_grid.nodes.clone(),
        y: fact.y_grid.nodes.clone(),
        density,
        l_weights: fact.l_grid.weights.clone(),
        y_weights: fact.y_grid.weights.clone(),
    })
}

/// `f(A | L, C) = chi(A, L | C) f(A | l0, C) / K~(C)` for binary `A`.
#[derive(Clone)]
pub struct ReconstructedPropensity {
    chi_al: OddsRatioFn,
    baseline_a: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl ReconstructedPropensity {
    pub fn prob(&self, a: u8, l: f64, c: f64) -> f64 {
        let p1 = (self.baseline_a)(c);
        let num1 = self.chi_al.eval(1.0, l, &[c]) * p1;
        let num0 = self.chi_al.eval(0.0, l, &[c]) * (1.0 - p1);
        let k_tilde = num0 + num1;
        if a == 1 { num1 / k_tilde } else { num0 / k_tilde }
    }
}

/// `baseline_a(c)` is `pr(A = 1 | l0, c)`.
pub fn reconstruct_propensity(
    chi_al: OddsRatioFn,
    baseline_a: impl Fn(f64) -> f64 + Send + Sync + 'static,
) -> ReconstructedPropensity {
    ReconstructedPropensity { chi_al, baseline_a: Arc::new(baseline_a) }
}

/// Conditionals entering the identity
/// `f(x1 | x2) / f(0 | x2) = sum_x3 [f(x1 | x2, x3) / f(0 | x2, x3)] f(x3 | x2, x1 = 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Inputs {
    /// `[x2][x1]`
    pub x1_given_x2: Vec<Vec<f64>>,
    /// `[x2][x3][x1]`
    pub x1_given_x23: Vec<Vec<Vec<f64>>>,
    /// `[x2][x3]`, at the first `x1` level.
    pub x3_given_x2_ref: Vec<Vec<f64>>,
}

impl Lemma1Inputs {
    /// Conditionals of a joint table indexed `[x1][x2][x3]`.
    pub fn from_joint(joint: &[Vec<Vec<f64>>]) -> Self {
        let n1 = joint.len();
        let n2 = joint[0].len();
        let n3 = joint[0][0].len();
        let x1_given_x2 = (0..n2)
            .map(|j| {
                let col: Vec<f64> = (0..n1).map(|i| joint[i][j].iter().sum()).collect();
                let s: f64 = col.iter().sum();
                col.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let x1_given_x23 = (0..n2)
            .map(|j| {
                (0..n3)
                    .map(|k| {
                        let s: f64 = (0..n1).map(|i| joint[i][j][k]).sum();
                        (0..n1).map(|i| joint[i][j][k] / s).collect()
                    })
                    .collect()
            })
            .collect();
        let x3_given_x2_ref = (0..n2)
            .map(|j| {
                let s: f64 = joint[0][j].iter().sum();
                joint[0][j].iter().map(|v| v / s).collect()
            })
            .collect();
        Self { x1_given_x2, x1_given_x23, x3_given_x2_ref }
    }
}

/// Largest absolute discrepancy between the two sides of the identity.
pub fn lemma1_residual(inputs: &Lemma1Inputs) -> f64 {
    let mut worst = 0.0f64;
    for (j, marg) in inputs.x1_given_x2.iter().enumerate() {
        for (i, m) in marg.iter().enumerate() {
            let lhs = m / marg[0];
            let rhs: f64 = inputs.x1_given_x23[j]
                .iter()
                .zip(&inputs.x3_given_x2_ref[j])
                .map(|(cond, w)| cond[i] / cond[0] * w)
                .sum();
            worst = worst.max((lhs - rhs).abs());
        }
    }
    worst
}

/// Strictly positive joint law of `(C, A, L, Y)` on finite supports with
/// binary `A`; `p[c][a][l][y]` sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLaw {
    pub c: Vec<f64>,
    pub l: Vec<f64>,
    pub y: Vec<f64>,
    pub p: Vec<[Vec<Vec<f64>>; 2]>,
}

impl DiscreteLaw {
    /// Random law with cell masses bounded away from zero. `L` and `Y`
    /// supports start at the reference value 0.
    pub fn random(seed: u64, n_c: usize, n_l: usize, n_y: usize) -> Self {
        let mut rng = stream_rng(seed, streams::DATA);
        let mut p: Vec<[Vec<Vec<f64>>; 2]> = (0..n_c)
            .map(|_| {
                let mut cell = || (0..n_l).map(|_| (0..n_y).map(|_| rng.random_range(0.05..1.0)).collect()).collect();
                [cell(), cell()]
            })
            .collect();
        let total: f64 = p.iter().flat_map(|ca| ca.iter()).flatten().flatten().sum();
        for v in p.iter_mut().flat_map(|ca| ca.iter_mut()).flatten().flatten() {
            *v /= total;
        }
        Self {
            c: (0..n_c).map(|i| i as f64 - 0.5).collect(),
            l: (0..n_l).map(|i| i as f64).collect(),
            y: (0..n_y).map(|i| i as f64).collect(),
            p,
        }
    }

    fn ci(&self, c: f64) -> usize {
        index_of(&self.c, c).expect("c on support")
    }

    /// `f(l, y | a, c)` as a table over `(l, y)`.
    pub fn ly_given_ac(&self, a: u8, c: f64) -> Table2 {
        let cell = &self.p[self.ci(c)][a as usize];
        let s: f64 = cell.iter().flatten().sum();
        let p = cell.iter().map(|r| r.iter().map(|v| v / s).collect()).collect();
        Table2 { x1: self.l.clone(), x2: self.y.clone(), p }
    }

    /// Joint of `(a, l)` given `c`.
    pub fn al_given_c(&self, c: f64) -> Table2 {
        let cell = &self.p[self.ci(c)];
        let p = (0..2).map(|a| cell[a].iter().map(|r| r.iter().sum()).collect()).collect();
        Table2 { x1: vec![0.0, 1.0], x2: self.l.clone(), p }
    }

    /// `pr(A = a | l, c)`.
    pub fn propensity(&self, a: u8, l: f64, c: f64) -> f64 {
        let t = self.al_given_c(c);
        let j = index_of(&self.l, l).expect("l on support");
        t.p[a as usize][j] / (t.p[0][j] + t.p[1][j])
    }

    /// The four components, read off the law.
    pub fn factorization(&self) -> Factorization {
        let (a0, l0, y0) = REFERENCE;
        let law = Arc::new(self.clone());
        let ly = {
            let law = law.clone();
            OddsRatioFn::new((l0, y0), move |l, y, cond| {
                let t = law.ly_given_ac(cond[0] as u8, cond[1]);
                match (index_of(&t.x1, l), index_of(&t.x2, y)) {
                    (Some(i), Some(j)) => t.p[i][j].ln(),
                    _ => f64::NAN,
                }
            })
        };
        let al = {
            let law = law.clone();
            OddsRatioFn::new((a0, l0), move |a, l, cond| {
                let t = law.al_given_c(cond[0]);
                match index_of(&t.x2, l) {
                    Some(j) => t.p[a as usize][j].ln(),
                    None => f64::NAN,
                }
            })
        };
        let bl = {
            let law = law.clone();
            move |l: f64, c: f64| {
                let t = law.al_given_c(c);
                let row = &t.p[a0 as usize];
                row[index_of(&law.l, l).expect("l on support")] / row.iter().sum::<f64>()
            }
        };
        let by = {
            let law = law.clone();
            move |y: f64, a: f64, c: f64| {
                let t = law.ly_given_ac(a as u8, c);
                let row = &t.p[index_of(&t.x1, l0).expect("l0 on support")];
                row[index_of(&t.x2, y).expect("y on support")] / row.iter().sum::<f64>()
            }
        };
        Factorization::new(ly, al, bl, by, Grid::discrete(self.l.clone()), Grid::discrete(self.y.clone()))
    }

    /// Largest deviation between the rebuilt and the true `f(l, y | a, c)`
    /// over all cells.
    pub fn round_trip_error(&self) -> Result<f64, OddsRatioError> {
        let fact = self.factorization();
        let mut worst = 0.0f64;
        for &c in &self.c {
            for a in 0..2u8 {
                let rebuilt = reconstruct_joint(&fact, f64::from(a), c)?;
                let truth = self.ly_given_ac(a, c);
                for (r, t) in rebuilt.density.iter().zip(&truth.p) {
                    for (x, y) in r.iter().zip(t) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
        Ok(worst)
    }

    /// `[x1 = a][x2 = c][x3 = l]` slice of the law for the identity check.
    pub fn lemma1_joint(&self) -> Vec<Vec<Vec<f64>>> {
        (0..2)
            .map(|a| (0..self.c.len()).map(|ci| self.p[ci][a].iter().map(|r| r.iter().sum()).collect()).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_product_ratio_by_hand() {
        let t = Table2::new(vec![0.0, 1.0], vec![0.0, 1.0], vec![vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
        let chi = odds_ratio_from_table(&t, (0.0, 0.0)).unwrap();
        assert!((chi.eval(1.0, 1.0, &[]) - 16.0).abs() < 1e-12);
        assert_eq!(chi.eval(0.0, 1.0, &[]), 1.0);
        assert_eq!(chi.eval(1.0, 0.0, &[]), 1.0);
        // symmetry under taking either conditional
        for view in [t.row_conditional(), t.column_conditional()] {
            let c = odds_ratio_from_table(&view, (0.0, 0.0)).unwrap();
            assert!((c.eval(1.0, 1.0, &[]) - 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn independence_table_has_unit_odds_ratio() {
        let px = [0.2, 0.5, 0.3];
        let py = [0.6, 0.4];
        let p = px.iter().map(|a| py.iter().map(|b| a * b).collect()).collect();
        let t = Table2::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0], p).unwrap();
        let chi = odds_ratio_from_table(&t, (1.0, 1.0)).unwrap();
        for x in [0.0, 1.0, 2.0] {
            for y in [0.0, 1.0] {
                assert!((chi.eval(x, y, &[]) - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_cell_is_rejected() {
        let t = Table2::new(vec![0.0, 1.0], vec![0.0, 1.0], vec![vec![0.5, 0.0], vec![0.2, 0.3]]).unwrap();
        assert_eq!(odds_ratio_from_table(&t, (0.0, 0.0)).unwrap_err(), OddsRatioError::UndefinedOddsRatio { row: 0, col: 1 });
    }

    #[test]
    fn binary_normalizer_by_enumeration() {
        let t = Table2::new(vec![0.0, 1.0], vec![0.0, 1.0], vec![vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
        let chi = odds_ratio_from_table(&t, (0.0, 0.0)).unwrap();
        let fact = Factorization::new(
            chi,
            OddsRatioFn::identity(),
            |_, _| 0.5,
            |_, _, _| 0.5,
            Grid::discrete(vec![0.0, 1.0]),
            Grid::discrete(vec![0.0, 1.0]),
        );
        // L keeps its uniform baseline marginal; within L = 1 the odds are 1:16
        let joint = reconstruct_joint(&fact, 0.0, 0.0).unwrap();
        let expected = [[0.25, 0.25], [1.0 / 34.0, 16.0 / 34.0]];
        for (i, (got, want)) in joint.density.iter().zip(&expected).enumerate() {
            for (j, (g, w)) in got.iter().zip(want).enumerate() {
                assert!((g - w).abs() < 1e-14, "{i}{j}");
            }
        }
        // K from the double sum with f(l | y0) read off the rebuilt joint
        let f_l_y0: Vec<f64> = (0..2).map(|i| joint.density[i][0] / (joint.density[0][0] + joint.density[1][0])).collect();
        let mut direct = 0.0;
        for (l, f) in f_l_y0.iter().enumerate() {
            for y in 0..2 {
                direct += fact.chi_ly.eval(l as f64, y as f64, &[0.0, 0.0]) * f * 0.5;
            }
        }
        direct /= f_l_y0[0];
        assert!((normalizer_k(&fact, 0.0, 0.0).unwrap() - direct).abs() < 1e-13);
        assert!((joint.total() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn independence_reconstruction_is_product() {
        let fl = [0.3, 0.7];
        let fy = [0.1, 0.6, 0.3];
        let fact = Factorization::new(
            OddsRatioFn::identity(),
            OddsRatioFn::identity(),
            move |l, _| fl[l as usize],
            move |y, _, _| fy[y as usize],
            Grid::discrete(vec![0.0, 1.0]),
            Grid::discrete(vec![0.0, 1.0, 2.0]),
        );
        let joint = reconstruct_joint(&fact, 1.0, 0.3).unwrap();
        for (row, pl) in joint.density.iter().zip(fl) {
            for (cell, py) in row.iter().zip(fy) {
                assert!((cell - pl * py).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn flat_odds_ratio_leaves_propensity_at_baseline() {
        let p = reconstruct_propensity(OddsRatioFn::identity(), |c| 0.2 + 0.1 * c);
        for l in [-2.0, 0.0, 3.5] {
            assert!((p.prob(1, l, 1.0) - 0.3).abs() < 1e-15);
            assert!((p.prob(0, l, 1.0) + p.prob(1, l, 1.0) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn lemma1_with_conditionally_independent_x3() {
        // x3 independent of x1 given x2
        let p1 = [[0.3, 0.7], [0.6, 0.4]];
        let p3 = [0.2, 0.5, 0.3];
        let joint: Vec<Vec<Vec<f64>>> =
            (0..2).map(|i| (0..2).map(|j| p3.iter().map(|v| 0.5 * p1[j][i] * v).collect()).collect()).collect();
        assert!(lemma1_residual(&Lemma1Inputs::from_joint(&joint)) < 1e-15);
    }
}
