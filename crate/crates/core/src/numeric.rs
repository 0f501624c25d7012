//! Small numerical helpers shared across modules: compensated summation,
//! the logistic function, sample quantiles and Gauss–Hermite quadrature.

use std::f64::consts::PI;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

pub fn mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Sample variance with divisor `n - 1`.
pub fn sample_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    compensated_sum(values.iter().map(|v| (v - m) * (v - m))) / (values.len() as f64 - 1.0)
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log(1 + exp(x)) without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Linear-interpolation quantile (Hyndman–Fan type 7) of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = x - mean;
    (-0.5 * z * z / var).exp() / (2.0 * PI * var).sqrt()
}

pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = x - mean;
    -0.5 * z * z / var - 0.5 * (2.0 * PI * var).ln()
}

/// Gauss–Hermite rule for integrals against `exp(-x^2)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes and weights by Newton iteration on the orthonormal Hermite
    /// recurrence, seeded with the usual asymptotic root estimates.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Hermite order must be positive");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let pim4 = PI.powf(-0.25);
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0_f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        // ascending order
        nodes.reverse();
        weights.reverse();
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// E[g(X)] for X ~ N(mean, sd^2).
    pub fn expect_normal<F: FnMut(f64) -> f64>(&self, mean: f64, sd: f64, mut g: F) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sd;
        let mut acc = CompensatedSum::new();
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc.add(w * g(mean + scale * x));
        }
        acc.value() / PI.sqrt()
    }

    /// Lebesgue integral of `g` using nodes placed at `center + sqrt(2) scale x_i`.
    /// Exact for `g` equal to a Gaussian density with that center and scale
    /// times a polynomial of degree below `2 * order`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, center: f64, scale: f64, mut g: F) -> f64 {
        let s = std::f64::consts::SQRT_2 * scale;
        let mut acc = CompensatedSum::new();
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc.add(w * (x * x).exp() * g(center + s * x));
        }
        acc.value() * s
    }

    /// Scaled abscissae and Lebesgue weights for `center`/`scale`.
    pub fn grid(&self, center: f64, scale: f64) -> (Vec<f64>, Vec<f64>) {
        let s = std::f64::consts::SQRT_2 * scale;
        let pts = self.nodes.iter().map(|x| center + s * x).collect();
        let wts = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * (x * x).exp() * s)
            .collect();
        (pts, wts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_hermite_moments() {
        for order in [1usize, 2, 5, 20, 40] {
            let gh = GaussHermite::new(order);
            let total: f64 = gh.weights().iter().sum();
            assert!((total - PI.sqrt()).abs() < 1e-12, "order {order}");
        }
        let gh = GaussHermite::new(20);
        // E[X^2] = 1, E[X^4] = 3 for a standard normal
        assert!((gh.expect_normal(0.0, 1.0, |x| x * x) - 1.0).abs() < 1e-12);
        assert!((gh.expect_normal(0.0, 1.0, |x| x.powi(4)) - 3.0).abs() < 1e-11);
        // MGF of N(1, 0.5^2) at t = 0.7
        let mgf = gh.expect_normal(1.0, 0.5, |x| (0.7 * x).exp());
        assert!((mgf - (0.7 + 0.5 * 0.25 * 0.49_f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn integrate_gaussian_density() {
        let gh = GaussHermite::new(20);
        let v = gh.integrate(0.3, 1.2, |x| normal_pdf(x, 0.5, 0.8));
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hand_quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&s, 0.25), 2.0);
        assert_eq!(quantile_sorted(&s, 0.5), 3.0);
        assert_eq!(quantile_sorted(&s, 0.75), 4.0);
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 5.0);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut v = vec![1e16, 1.0, -1e16];
        v.extend(std::iter::repeat_n(1.0, 10));
        assert_eq!(compensated_sum(v), 11.0);
    }

    #[test]
    fn expit_is_stable() {
        assert_eq!(expit(800.0), 1.0);
        assert_eq!(expit(-800.0), 0.0);
        assert!((expit(0.0) - 0.5).abs() < 1e-16);
        assert!((log1p_exp(1000.0) - 1000.0).abs() < 1e-12);
    }
}
