//! Numerical witnesses that separately specified working models for the
//! confounder, the propensity and the outcome can fail to share any joint law.

use nalgebra::{DMatrix, DVector};

use crate::numeric::{expit, logit};

/// `logit pr(L = 1 | A, Y, C) = phi0 + phi1 A + phi2 Y + phi3 C` for binary `L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfounder {
    pub phi: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncompatibilityReport {
    /// Sup-norm distance between the marginalized logit and its best
    /// linear approximation.
    pub gap: f64,
    /// Least-squares fit `(intercept, A, C)` on the logit scale, with the
    /// `A` coefficient fixed at the propensity model's log odds ratio.
    pub fitted: [f64; 3],
}

/// Marginalize the logistic confounder model over `pr(Y = 1 | A, C)` for
/// binary `Y`, then measure how far `logit pr(L = 1 | A, C)` is from a linear
/// logit whose `A` coefficient is the log odds ratio `lambda1` that a
/// logistic propensity `lambda0 + lambda1 L + lambda2 C` assigns to `(A, L)`.
pub fn incompatibility_gap(
    t: &LogisticConfounder,
    lambda1: f64,
    pr_y1: impl Fn(u8, f64) -> f64,
    c_grid: &[f64],
) -> IncompatibilityReport {
    let [p0, p1, p2, p3] = t.phi;
    let mut points = Vec::with_capacity(2 * c_grid.len());
    for a in 0..2u8 {
        for &c in c_grid {
            let base = p0 + p1 * f64::from(a) + p3 * c;
            let q = pr_y1(a, c);
            let marg = (1.0 - q) * expit(base) + q * expit(base + p2);
            points.push((a, c, logit(marg)));
        }
    }
    // least squares for intercept and C slope after removing lambda1 * A
    let x = DMatrix::from_fn(points.len(), 2, |i, j| if j == 0 { 1.0 } else { points[i].1 });
    let r = DVector::from_iterator(points.len(), points.iter().map(|(a, _, v)| v - lambda1 * f64::from(*a)));
    let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * r)).unwrap_or_else(|| DVector::zeros(2));
    let gap = points
        .iter()
        .map(|(a, c, v)| (v - (beta[0] + lambda1 * f64::from(*a) + beta[1] * c)).abs())
        .fold(0.0, f64::max);
    IncompatibilityReport { gap, fitted: [beta[0], lambda1, beta[1]] }
}

/// Normal conditionals `Y | L ~ N(nu0 + nu2 L^3, sigma_y^2)` and
/// `L | Y ~ N(phi0 + phi2 Y^2, sigma_l^2)` at fixed `(A, C)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalPair {
    pub nu0: f64,
    pub nu2: f64,
    pub sigma_y_sq: f64,
    pub phi0: f64,
    pub phi2: f64,
    pub sigma_l_sq: f64,
}

impl NormalPair {
    fn log_y_given_l(&self, y: f64, l: f64) -> f64 {
        let r = y - self.nu0 - self.nu2 * l.powi(3);
        -0.5 * r * r / self.sigma_y_sq
    }

    fn log_l_given_y(&self, l: f64, y: f64) -> f64 {
        let r = l - self.phi0 - self.phi2 * y * y;
        -0.5 * r * r / self.sigma_l_sq
    }
}

/// Two conditionals come from one joint only if `log f(y|l) - log f(l|y)`
/// separates into a function of `y` plus a function of `l`. Returns the
/// largest cross difference of that log ratio over adjacent grid cells,
/// scaled by the cell area; it vanishes exactly for separable ratios.
pub fn normal_pair_gap(pair: &NormalPair, l_grid: &[f64], y_grid: &[f64]) -> f64 {
    let g = |l: f64, y: f64| pair.log_y_given_l(y, l) - pair.log_l_given_y(l, y);
    let mut worst = 0.0f64;
    for lw in l_grid.windows(2) {
        for yw in y_grid.windows(2) {
            let cross = g(lw[1], yw[1]) - g(lw[1], yw[0]) - g(lw[0], yw[1]) + g(lw[0], yw[0]);
            worst = worst.max((cross / ((lw[1] - lw[0]) * (yw[1] - yw[0]))).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn no_outcome_dependence_is_compatible() {
        let t = LogisticConfounder { phi: [-0.2, 0.5, 0.0, 0.3] };
        let rep = incompatibility_gap(&t, 0.5, |_, _| 0.5, &grid(-3.0, 3.0, 41));
        assert!(rep.gap <= 1e-10, "{}", rep.gap);
        assert!((rep.fitted[0] + 0.2).abs() < 1e-10 && (rep.fitted[2] - 0.3).abs() < 1e-10);
    }

    #[test]
    fn logistic_mixture_is_not_logistic() {
        let t = LogisticConfounder { phi: [-0.23, 0.058, 0.41, 0.016] };
        let rep = incompatibility_gap(&t, 0.058, |_, _| 0.5, &grid(-3.0, 3.0, 41));
        assert!(rep.gap > 0.0);
    }

    #[test]
    fn separable_pair_has_zero_gap_and_cubic_pair_does_not() {
        let ls = grid(-2.0, 2.0, 21);
        let ys = grid(-2.0, 2.0, 21);
        let indep = NormalPair { nu0: 0.3, nu2: 0.0, sigma_y_sq: 0.5, phi0: -0.1, phi2: 0.0, sigma_l_sq: 0.4 };
        assert!(normal_pair_gap(&indep, &ls, &ys) <= 1e-10);
        let cubic = NormalPair { nu2: 0.49, phi2: 0.41, ..indep };
        assert!(normal_pair_gap(&cubic, &ls, &ys) > 0.1);
    }
}
