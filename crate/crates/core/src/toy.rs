//! A fully discrete law over binary `(C, A, L, Y)` with a tabulated
//! missingness mechanism. Every functional is computed by exact enumeration,
//! which makes it the reference for the estimators' oracle tests.

use rand::Rng;
use serde::Deserialize;

use crate::data::{Dataset, ObservedRecord};
use crate::estimators::EstimationError;
use crate::nuisance::{CondTerms, Nuisance};
use crate::rng::{stream_rng, streams};

const FIXTURE_V1: &str = include_str!("../fixtures/toy_dgp_v1.toml");

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLaw {
    /// pr(C, A, L, Y) at index `8c + 4a + 2l + y`.
    joint: [f64; 16],
    /// pr(R = 1 | A, Y, C) at index `4c + 2a + y`.
    observe: [f64; 8],
}

#[derive(Deserialize)]
struct ToyFile {
    version: u32,
    joint: Vec<f64>,
    observe: Vec<f64>,
}

fn bit(x: f64) -> usize {
    usize::from(x >= 0.5)
}

fn idx(c: usize, a: usize, l: usize, y: usize) -> usize {
    8 * c + 4 * a + 2 * l + y
}

impl ToyLaw {
    pub fn new(joint: [f64; 16], observe: [f64; 8]) -> Result<Self, String> {
        if joint.iter().any(|&p| p.is_nan() || p <= 0.0) {
            return Err("joint probabilities must be strictly positive".into());
        }
        if observe.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err("observation probabilities must lie in (0, 1]".into());
        }
        let total: f64 = joint.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("joint probabilities sum to {total}"));
        }
        let mut joint = joint;
        joint.iter_mut().for_each(|p| *p /= total);
        Ok(Self { joint, observe })
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let file: ToyFile = toml::from_str(text).map_err(|e| e.to_string())?;
        if file.version != 1 {
            return Err(format!("unsupported toy law version {}", file.version));
        }
        let joint: [f64; 16] = file.joint.try_into().map_err(|_| "joint needs 16 entries".to_string())?;
        let observe: [f64; 8] = file.observe.try_into().map_err(|_| "observe needs 8 entries".to_string())?;
        Self::new(joint, observe)
    }

    /// The versioned fixture law.
    pub fn fixture() -> Self {
        Self::from_toml(FIXTURE_V1).expect("bundled toy fixture is valid")
    }

    pub fn prob(&self, c: usize, a: usize, l: usize, y: usize) -> f64 {
        self.joint[idx(c, a, l, y)]
    }

    fn marginal(&self, keep: impl Fn(usize, usize, usize, usize) -> bool) -> f64 {
        let mut s = 0.0;
        for c in 0..2 {
            for a in 0..2 {
                for l in 0..2 {
                    for y in 0..2 {
                        if keep(c, a, l, y) {
                            s += self.prob(c, a, l, y);
                        }
                    }
                }
            }
        }
        s
    }

    pub fn observe_prob(&self, a: usize, y: usize, c: usize) -> f64 {
        self.observe[4 * c + 2 * a + y]
    }

    pub fn pr_a1(&self) -> f64 {
        self.marginal(|_, a, _, _| a == 1)
    }

    /// pr(A = 1 | L = l, C = c).
    pub fn propensity_at(&self, l: usize, c: usize) -> f64 {
        let num = self.marginal(|cc, a, ll, _| cc == c && ll == l && a == 1);
        num / self.marginal(|cc, _, ll, _| cc == c && ll == l)
    }

    /// pr(Y = 1 | A = a, L = l, C = c).
    pub fn outcome_mean(&self, a: usize, l: usize, c: usize) -> f64 {
        self.prob(c, a, l, 1) / (self.prob(c, a, l, 0) + self.prob(c, a, l, 1))
    }

    /// pr(L = 1 | A = a, Y = y, C = c).
    pub fn confounder_prob(&self, a: usize, y: usize, c: usize) -> f64 {
        self.prob(c, a, 1, y) / (self.prob(c, a, 0, y) + self.prob(c, a, 1, y))
    }

    /// E[Y0 | A = 1] by the g-formula over (L, C).
    pub fn psi(&self) -> f64 {
        let mut s = 0.0;
        for c in 0..2 {
            for l in 0..2 {
                let w = self.marginal(|cc, a, ll, _| cc == c && ll == l && a == 1);
                s += w * self.outcome_mean(0, l, c);
            }
        }
        s / self.pr_a1()
    }

    /// E[Y | A = 1].
    pub fn theta(&self) -> f64 {
        self.marginal(|_, a, _, y| a == 1 && y == 1) / self.pr_a1()
    }

    pub fn att(&self) -> f64 {
        self.theta() - self.psi()
    }

    /// The g-formula adjusting for `C` only: the limit of the naive estimator.
    pub fn psi_ignoring_confounder(&self) -> f64 {
        let mut s = 0.0;
        for c in 0..2 {
            let treated = self.marginal(|cc, a, _, _| cc == c && a == 1);
            let untreated = self.marginal(|cc, a, _, _| cc == c && a == 0);
            let y1 = self.marginal(|cc, a, _, y| cc == c && a == 0 && y == 1);
            s += treated * y1 / untreated;
        }
        s / self.pr_a1()
    }

    /// Odds ratio between `A` and `L` given `C = c`.
    pub fn chi_al(&self, c: usize) -> f64 {
        let p = |a, l| self.marginal(|cc, aa, ll, _| cc == c && aa == a && ll == l);
        p(1, 1) * p(0, 0) / (p(1, 0) * p(0, 1))
    }

    /// Same law with pr(R = 1 | A, Y, C) replaced.
    pub fn with_observation(&self, observe: [f64; 8]) -> Self {
        Self { joint: self.joint, observe }
    }

    /// Same law with missingness completely at random.
    pub fn with_mcar(&self, p: f64) -> Self {
        self.with_observation([p; 8])
    }

    /// A different law sharing pr(C) and the `A`-`L` odds ratio given `C`:
    /// pr(A, L | C) is tilted by separable factors `a_tilt[c]^A l_tilt[c]^L`
    /// and pr(Y = 1 | A, L, C) is replaced by `y1[4c + 2a + l]`.
    #[allow(clippy::needless_range_loop)]
    pub fn chi_preserving_variant(&self, a_tilt: [f64; 2], l_tilt: [f64; 2], y1: [f64; 8]) -> Self {
        let mut joint = [0.0; 16];
        for c in 0..2 {
            let pc = self.marginal(|cc, _, _, _| cc == c);
            let mut cell = [[0.0; 2]; 2];
            let mut total = 0.0;
            for a in 0..2 {
                for l in 0..2 {
                    let base = self.marginal(|cc, aa, ll, _| cc == c && aa == a && ll == l);
                    let w = base * a_tilt[c].powi(a as i32) * l_tilt[c].powi(l as i32);
                    cell[a][l] = w;
                    total += w;
                }
            }
            for a in 0..2 {
                for l in 0..2 {
                    let pal = pc * cell[a][l] / total;
                    let py = y1[4 * c + 2 * a + l];
                    joint[idx(c, a, l, 1)] = pal * py;
                    joint[idx(c, a, l, 0)] = pal * (1.0 - py);
                }
            }
        }
        Self { joint, observe: self.observe }
    }

    /// Expectation of `f` over the observed-data law: each full-data atom
    /// splits into an observed record with probability π and a record with
    /// the confounder missing otherwise.
    pub fn expectation<F: FnMut(&ObservedRecord) -> f64>(&self, mut f: F) -> f64 {
        let mut s = 0.0;
        for c in 0..2 {
            for a in 0..2 {
                for l in 0..2 {
                    for y in 0..2 {
                        let p = self.prob(c, a, l, y);
                        let pi = self.observe_prob(a, y, c);
                        let (yf, cf) = (y as f64, c as f64);
                        s += p * pi * f(&ObservedRecord::complete(yf, a as u8, cf, l as f64));
                        if pi < 1.0 {
                            s += p * (1.0 - pi) * f(&ObservedRecord::missing(yf, a as u8, cf));
                        }
                    }
                }
            }
        }
        s
    }

    /// `n` independent draws; returns the observed data and the same subjects
    /// with every confounder kept.
    pub fn sample(&self, n: usize, seed: u64) -> (Dataset, Dataset) {
        let mut rng = stream_rng(seed, streams::DATA);
        let mut cdf = [0.0; 16];
        let mut acc = 0.0;
        for (i, p) in self.joint.iter().enumerate() {
            acc += p;
            cdf[i] = acc;
        }
        let mut observed = Vec::with_capacity(n);
        let mut full = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.iter().position(|&v| u < v).unwrap_or(15);
            let (c, a, l, y) = (k >> 3, (k >> 2) & 1, (k >> 1) & 1, k & 1);
            let complete = ObservedRecord::complete(y as f64, a as u8, c as f64, l as f64);
            let keep = rng.random::<f64>() < self.observe_prob(a, y, c);
            full.push(complete);
            observed.push(if keep { complete } else { ObservedRecord::missing(y as f64, a as u8, c as f64) });
        }
        (Dataset::new(observed), Dataset::new(full))
    }
}

/// Exact nuisances, each component read off its own law so that individual
/// working models can be made wrong while the others stay correct.
#[derive(Debug, Clone)]
pub struct ToyNuisance {
    pub missingness: ToyLaw,
    pub propensity: ToyLaw,
    pub confounder: ToyLaw,
    pub outcome: ToyLaw,
    pub pr_a1: f64,
}

impl ToyNuisance {
    /// All components from `law`.
    pub fn exact(law: &ToyLaw) -> Self {
        Self { missingness: law.clone(), propensity: law.clone(), confounder: law.clone(), outcome: law.clone(), pr_a1: law.pr_a1() }
    }
}

impl Nuisance for ToyNuisance {
    fn pi(&self, rec: &ObservedRecord) -> f64 {
        self.missingness.observe_prob(usize::from(rec.a), bit(rec.y), bit(rec.c))
    }

    fn propensity(&self, l: f64, c: f64) -> f64 {
        self.propensity.propensity_at(bit(l), bit(c))
    }

    fn outcome_mean0(&self, l: f64, c: f64) -> f64 {
        self.outcome.outcome_mean(0, bit(l), bit(c))
    }

    fn cond_terms(&self, rec: &ObservedRecord) -> Result<CondTerms, EstimationError> {
        let p1 = self.confounder.confounder_prob(usize::from(rec.a), bit(rec.y), bit(rec.c));
        let mut terms = CondTerms { e_odds: 0.0, zeta: 0.0, v4_mean: 0.0 };
        for (l, w) in [(0.0, 1.0 - p1), (1.0, p1)] {
            let odds = self.odds(l, rec.c);
            let m0 = self.outcome_mean0(l, rec.c);
            terms.e_odds += w * odds;
            terms.zeta += w * odds * m0;
            terms.v4_mean += w * m0;
        }
        Ok(terms)
    }

    fn pr_a1(&self) -> f64 {
        self.pr_a1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_a_proper_law() {
        let law = ToyLaw::fixture();
        assert!((law.joint.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(law.joint.iter().all(|&p| p >= 0.01));
        assert!((law.expectation(|_| 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn variant_preserves_odds_ratio_and_marginal_c() {
        let law = ToyLaw::fixture();
        let alt = law.chi_preserving_variant([1.7, 0.6], [0.8, 1.4], [0.2, 0.5, 0.4, 0.7, 0.3, 0.35, 0.6, 0.9]);
        for c in 0..2 {
            assert!((law.chi_al(c) - alt.chi_al(c)).abs() < 1e-12);
            let pc = |l: &ToyLaw| l.marginal(|cc, _, _, _| cc == c);
            assert!((pc(&law) - pc(&alt)).abs() < 1e-15);
        }
        assert!((alt.propensity_at(1, 0) - law.propensity_at(1, 0)).abs() > 0.01);
    }

    #[test]
    fn g_formula_and_ipw_forms_agree() {
        let law = ToyLaw::fixture();
        let mut s = 0.0;
        for c in 0..2 {
            for l in 0..2 {
                let p = law.propensity_at(l, c);
                for y in 0..2 {
                    s += law.prob(c, 0, l, y) * p / (1.0 - p) * y as f64;
                }
            }
        }
        assert!((s / law.pr_a1() - law.psi()).abs() < 1e-14);
    }
}
