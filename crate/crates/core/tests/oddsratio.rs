use drmiss::data::{Dataset, ObservedRecord};
use drmiss::numeric::{expit, normal_pdf};
use drmiss::oddsratio::{
    fit_reparam_mle, fit_reparam_mle_with, lemma1_residual, normalizer_k, observed_loglik, odds_ratio_from_table,
    reconstruct_joint, reconstruct_propensity, sample_reparam, DiscreteLaw, Factorization, Grid, LIntegration,
    Lemma1Inputs, OddsRatioFn, ReparamParams, Table2, PARAMETER_NAMES,
};
use drmiss::rng::{stream_rng, streams};
use drmiss::sim::DgpParams;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn extract_and_rebuild_round_trip() {
    for seed in 0..50 {
        let law = DiscreteLaw::random(seed, 3, 2, 2);
        let err = law.round_trip_error().unwrap();
        assert!(err <= 1e-12, "seed {seed}: {err:e}");
    }
    let wide = DiscreteLaw::random(77, 2, 4, 5);
    assert!(wide.round_trip_error().unwrap() <= 1e-12);
}

#[test]
fn lemma1_holds_on_coherent_joints() {
    for seed in 0..50 {
        let law = DiscreteLaw::random(seed, 3, 3, 2);
        let r = lemma1_residual(&Lemma1Inputs::from_joint(&law.lemma1_joint()));
        assert!(r <= 1e-10, "seed {seed}: {r:e}");
    }
}

fn random_cube(seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = stream_rng(seed, streams::DATA);
    (0..3).map(|_| (0..3).map(|_| (0..3).map(|_| rng.random_range(0.01..1.0)).collect()).collect()).collect()
}

#[test]
fn lemma1_on_three_by_three_by_three() {
    let joint = random_cube(5);
    let inputs = Lemma1Inputs::from_joint(&joint);
    assert!(lemma1_residual(&inputs) <= 1e-12);
    let mut broken = inputs.clone();
    broken.x1_given_x2[1][2] += 0.05;
    assert!(lemma1_residual(&broken) > 1e-3);
}

#[test]
fn rebuilt_propensity_matches_the_law() {
    for seed in 0..20 {
        let law = DiscreteLaw::random(seed, 3, 3, 2);
        let fact = law.factorization();
        let law2 = law.clone();
        let prop = reconstruct_propensity(fact.chi_al.clone(), move |c| law2.propensity(1, 0.0, c));
        for &c in &law.c {
            for &l in &law.l {
                for a in 0..2u8 {
                    assert!((prop.prob(a, l, c) - law.propensity(a, l, c)).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn logistic_propensity_from_odds_ratio_and_baseline() {
    let dgp = DgpParams::scenario1();
    let lambda = dgp.lambda();
    assert!((lambda[1] - 0.5).abs() < 1e-12);
    let chi = OddsRatioFn::log_bilinear(lambda[1], (0.0, 0.0));
    let prop = reconstruct_propensity(chi, move |c| expit(lambda[0] + lambda[2] * c));
    for l in [-2.0, -0.5, 0.0, 0.7, 2.5] {
        for c in [-1.5, 0.0, 1.2] {
            let expected = expit(lambda[0] + lambda[1] * l + lambda[2] * c);
            assert!((prop.prob(1, l, c) - expected).abs() < 1e-14);
        }
    }
}

fn perturbed(law: &DiscreteLaw, seed: u64) -> Factorization {
    let mut rng = stream_rng(seed, streams::FIT);
    let mut fact = law.factorization();
    let tables: Vec<Table2> = law
        .c
        .iter()
        .map(|_| {
            let p = (0..2).map(|_| law.l.iter().map(|_| rng.random_range(0.01..5.0)).collect()).collect();
            Table2::new(vec![0.0, 1.0], law.l.clone(), p).unwrap()
        })
        .collect();
    let chis: Vec<OddsRatioFn> = tables.iter().map(|t| odds_ratio_from_table(t, (0.0, 0.0)).unwrap()).collect();
    let cs = law.c.clone();
    fact.chi_al = OddsRatioFn::new((0.0, 0.0), move |a, l, cond| {
        let k = cs.iter().position(|v| *v == cond[0]).unwrap();
        chis[k].log_eval(a, l, &[])
    });
    fact
}

#[test]
fn variation_independence_under_odds_ratio_perturbation() {
    for seed in 0..100 {
        let law = DiscreteLaw::random(1000 + seed, 2, 3, 3);
        let fact = perturbed(&law, seed);
        for &c in &law.c {
            for a in [0.0, 1.0] {
                let joint = reconstruct_joint(&fact, a, c).unwrap();
                assert!((joint.total() - 1.0).abs() <= 1e-9);
                assert!(joint.density.iter().flatten().all(|v| *v > 0.0));
            }
        }
    }
}

struct Bivariate {
    my: f64,
    ml: f64,
    vy: f64,
    vl: f64,
    cov: f64,
}

impl Bivariate {
    fn at(dgp: &DgpParams, a: f64, c: f64) -> Self {
        Self {
            my: dgp.upsilon[0] + dgp.upsilon[1] * a + dgp.upsilon[2] * c,
            ml: dgp.alpha[0] + dgp.alpha[1] * a + dgp.alpha[2] * c,
            vy: dgp.sigma_y_sq,
            vl: dgp.sigma_l_sq,
            cov: dgp.sigma_yl,
        }
    }

    fn density(&self, l: f64, y: f64) -> f64 {
        normal_pdf(l, self.ml, self.vl) * normal_pdf(y, self.my + self.cov / self.vl * (l - self.ml), self.vy - self.cov * self.cov / self.vl)
    }
}

fn gaussian_factorization(dgp: &DgpParams, l_grid: Grid, y_grid: Grid) -> Factorization {
    let nu = dgp.nu();
    let s_r = dgp.outcome_residual_variance();
    let (a0, a2, sl) = (dgp.alpha[0], dgp.alpha[2], dgp.sigma_l_sq);
    Factorization::new(
        OddsRatioFn::log_bilinear(nu[2] / s_r, (0.0, 0.0)),
        OddsRatioFn::log_bilinear(dgp.alpha[1] / sl, (0.0, 0.0)),
        move |l, c| normal_pdf(l, a0 + a2 * c, sl),
        move |y, a, c| normal_pdf(y, nu[0] + nu[1] * a + nu[3] * c, s_r),
        l_grid,
        y_grid,
    )
}

#[test]
fn gaussian_reconstruction_on_a_grid() {
    let dgp = DgpParams::scenario1();
    for (a, c) in [(0.0, 0.0), (1.0, 0.8), (0.0, -1.3)] {
        let bv = Bivariate::at(&dgp, a, c);
        let (sl, sy) = (bv.vl.sqrt(), bv.vy.sqrt());
        let fact = gaussian_factorization(
            &dgp,
            Grid::uniform(bv.ml - 6.0 * sl, bv.ml + 6.0 * sl, 50),
            Grid::uniform(bv.my - 6.0 * sy, bv.my + 6.0 * sy, 50),
        );
        let joint = reconstruct_joint(&fact, a, c).unwrap();
        let mut worst = 0.0f64;
        for (i, &l) in joint.l.iter().enumerate() {
            for (j, &y) in joint.y.iter().enumerate() {
                worst = worst.max((joint.density[i][j] - bv.density(l, y)).abs());
            }
        }
        assert!(worst <= 1e-3, "({a}, {c}): {worst:e}");
        assert!((joint.total() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn gaussian_normalizer_matches_monte_carlo() {
    let dgp = DgpParams::scenario1();
    let (a, c) = (1.0, 0.4);
    let bv = Bivariate::at(&dgp, a, c);
    let fact = gaussian_factorization(
        &dgp,
        Grid::gauss_hermite(40, bv.ml, bv.vl.sqrt()),
        Grid::gauss_hermite(40, bv.my, bv.vy.sqrt()),
    );
    let k = normalizer_k(&fact, a, c).unwrap();

    // l ~ f(l | y0, a, c), y ~ f(y | l0, a, c), independently
    let phi = dgp.phi();
    let nu = dgp.nu();
    let m_l = phi[0] + phi[1] * a + phi[3] * c;
    let v_l = dgp.confounder_residual_variance();
    let m_y = nu[0] + nu[1] * a + nu[3] * c;
    let v_y = dgp.outcome_residual_variance();
    let mut rng = stream_rng(3, streams::DATA);
    let n = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let l = m_l + v_l.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let y = m_y + v_y.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let v = fact.chi_ly.eval(l, y, &[a, c]);
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    let scale = 1.0 / normal_pdf(0.0, m_l, v_l);
    assert!((k - mean * scale).abs() <= 3.0 * se * scale, "K {k} vs {} +- {}", mean * scale, se * scale);
}

#[test]
fn independence_components_rebuild_the_product() {
    let fact = Factorization::new(
        OddsRatioFn::identity(),
        OddsRatioFn::identity(),
        |l, _| normal_pdf(l, 0.2, 0.5),
        |y, _, _| normal_pdf(y, -0.1, 0.8),
        Grid::gauss_hermite(20, 0.2, 0.5f64.sqrt()),
        Grid::gauss_hermite(20, -0.1, 0.8f64.sqrt()),
    );
    let joint = reconstruct_joint(&fact, 1.0, 0.0).unwrap();
    for (i, &l) in joint.l.iter().enumerate() {
        for (j, &y) in joint.y.iter().enumerate() {
            let expected = normal_pdf(l, 0.2, 0.5) * normal_pdf(y, -0.1, 0.8);
            assert!((joint.density[i][j] - expected).abs() <= 1e-12 * expected.max(1e-300));
        }
    }
}

proptest! {
    #[test]
    fn odds_ratio_is_one_at_reference(cells in proptest::collection::vec(0.01f64..1.0, 6), r1 in 0usize..2, r2 in 0usize..3) {
        let p = vec![cells[0..3].to_vec(), cells[3..6].to_vec()];
        let t = Table2::new(vec![0.0, 1.0], vec![0.0, 1.0, 2.0], p).unwrap();
        let reference = (r1 as f64, r2 as f64);
        let chi = odds_ratio_from_table(&t, reference).unwrap();
        for x in 0..2 {
            prop_assert!((chi.eval(x as f64, reference.1, &[]) - 1.0).abs() < 1e-14);
        }
        for y in 0..3 {
            prop_assert!((chi.eval(reference.0, y as f64, &[]) - 1.0).abs() < 1e-14);
        }
        // either conditional view gives the same odds ratio
        let by_rows = odds_ratio_from_table(&t.row_conditional(), reference).unwrap();
        prop_assert!((by_rows.eval(1.0, 2.0, &[]) - chi.eval(1.0, 2.0, &[])).abs() < 1e-12 * chi.eval(1.0, 2.0, &[]));
    }

    #[test]
    fn round_trip_for_any_positive_law(seed in 0u64..10_000) {
        let law = DiscreteLaw::random(seed, 2, 3, 2);
        prop_assert!(law.round_trip_error().unwrap() <= 1e-12);
    }
}

fn truth() -> ReparamParams {
    ReparamParams::from_gaussian(&DgpParams::scenario1())
}

const ZETA: [f64; 2] = [-0.44, 0.40];
const ETA: [f64; 4] = [1.0, -1.75, -1.75, 1.25];

#[test]
fn complete_data_loglik_needs_no_integration() {
    let data = sample_reparam(&truth(), ZETA, [50.0, 0.0, 0.0, 0.0], 500, 4);
    assert!(data.all_observed());
    let p = truth();
    let direct: f64 = data.iter().map(|r| p.log_joint(r.y, r.l.unwrap(), r.a_f64(), r.c)).sum();
    let ll = observed_loglik(&p, &data, &LIntegration::GaussHermite(20)).unwrap();
    assert!((ll - direct).abs() < 1e-9);
}

#[test]
fn binary_support_marginal_is_two_term_sum() {
    let p = truth();
    let data = Dataset::new(vec![ObservedRecord::missing(0.7, 1, -0.3)]);
    let ll = observed_loglik(&p, &data, &LIntegration::Support(vec![0.0, 1.0])).unwrap();
    let expected = (p.log_joint(0.7, 0.0, 1.0, -0.3).exp() + p.log_joint(0.7, 1.0, 1.0, -0.3).exp()).ln();
    assert!((ll - expected).abs() < 1e-14);
}

#[test]
fn quadrature_order_does_not_move_the_loglik() {
    let data = sample_reparam(&truth(), ZETA, ETA, 5000, 8);
    let l20 = observed_loglik(&truth(), &data, &LIntegration::GaussHermite(20)).unwrap();
    let l40 = observed_loglik(&truth(), &data, &LIntegration::GaussHermite(40)).unwrap();
    assert!((l20 - l40).abs() <= 1e-8, "{l20} vs {l40}");
}

fn ols(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let k = x[0].len();
    let xm = nalgebra::DMatrix::from_fn(x.len(), k, |i, j| x[i][j]);
    let yv = nalgebra::DVector::from_column_slice(y);
    let b = (xm.transpose() * &xm).lu().solve(&(xm.transpose() * &yv)).unwrap();
    let rss = (yv - xm * &b).norm_squared();
    (b.as_slice().to_vec(), rss / x.len() as f64)
}

#[test]
fn complete_data_mle_matches_regression_decomposition() {
    let data = sample_reparam(&truth(), ZETA, [50.0, 0.0, 0.0, 0.0], 20_000, 12);
    let init = ReparamParams { alpha: [0.0, 0.0], log_sigma_j_sq: 0.0, omega: 0.0, beta: 0.0, theta_r: [0.0; 3], log_sigma_r_sq: 0.0 };
    let fit = fit_reparam_mle(&data, &init, 20).unwrap();
    assert!(fit.grad_norm <= 1e-6);

    let xl: Vec<Vec<f64>> = data.iter().map(|r| vec![1.0, r.c, r.a_f64()]).collect();
    let ls: Vec<f64> = data.iter().map(|r| r.l.unwrap()).collect();
    let (bl, vl) = ols(&xl, &ls);
    let xy: Vec<Vec<f64>> = data.iter().map(|r| vec![1.0, r.a_f64(), r.c, r.l.unwrap()]).collect();
    let ys: Vec<f64> = data.iter().map(|r| r.y).collect();
    let (by, vy) = ols(&xy, &ys);
    let expected = [bl[0], bl[1], vl.ln(), by[3] / vy, bl[2] / vl, by[0], by[1], by[2], vy.ln()];
    for (k, (got, want)) in fit.params.to_vec().iter().zip(expected).enumerate() {
        assert!((got - want).abs() < 1e-4, "{}: {got} vs {want}", PARAMETER_NAMES[k]);
    }
}

#[test]
fn profile_maximum_is_below_full_maximum() {
    let data = sample_reparam(&truth(), ZETA, ETA, 4000, 31);
    let mut start = truth();
    start.omega += 0.3;
    let full = fit_reparam_mle(&data, &start, 20).unwrap();
    let mut free = [true; 9];
    free[3] = false;
    let profile = fit_reparam_mle_with(&data, &truth(), &LIntegration::GaussHermite(20), &free).unwrap();
    assert!(profile.loglik <= full.loglik + 1e-8);
    assert_eq!(profile.params.omega, truth().omega);
    assert!(profile.se[3].is_nan());
}

#[test]
fn non_finite_loglik_names_the_record() {
    let data = Dataset::new(vec![ObservedRecord::complete(0.1, 0, 0.0, 0.0), ObservedRecord::complete(f64::INFINITY, 1, 0.0, 0.0)]);
    let err = observed_loglik(&truth(), &data, &LIntegration::GaussHermite(10)).unwrap_err();
    assert_eq!(err, drmiss::oddsratio::OddsRatioError::NonFiniteLikelihood { index: 1 });
}
