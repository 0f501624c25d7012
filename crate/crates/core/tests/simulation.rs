use nalgebra::{DMatrix, DVector};

use drmiss::sim::{figure_scenario, generate_dataset, run_monte_carlo, DgpParams};
use drmiss::{fit_nuisances, EstimatorKind, FitRecipe};

#[test]
fn confounder_regression_among_complete_cases_recovers_phi() {
    let params = DgpParams::scenario1();
    let data = generate_dataset(&params, 200_000, 2024);
    let cc: Vec<_> = data.iter().filter(|r| r.is_complete()).collect();
    let x = DMatrix::from_fn(cc.len(), 4, |i, j| match j {
        0 => 1.0,
        1 => f64::from(cc[i].a),
        2 => cc[i].y,
        _ => cc[i].c,
    });
    let l = DVector::from_iterator(cc.len(), cc.iter().map(|r| r.l.unwrap()));
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let beta = &xtx_inv * x.transpose() * &l;
    let resid = &l - &x * &beta;
    let s2 = resid.norm_squared() / (cc.len() - 4) as f64;
    let truth = params.phi();
    for j in 0..4 {
        let se = (s2 * xtx_inv[(j, j)]).sqrt();
        assert!((beta[j] - truth[j]).abs() <= 4.0 * se, "phi{j}: {} vs {} (se {se})", beta[j], truth[j]);
    }
    // the library's confounder fit is the same regression
    let fits = fit_nuisances(&data, &FitRecipe::default()).unwrap();
    for j in 0..4 {
        assert!((fits.phi()[j] - beta[j]).abs() < 1e-9);
    }
    assert!((s2 - params.confounder_residual_variance()).abs() < 0.01);
}

#[test]
fn weighted_propensity_fit_recovers_lambda() {
    let params = DgpParams::scenario1();
    let truth = params.lambda();
    assert!((truth[0] + 0.42).abs() < 0.01 && (truth[1] - 0.5).abs() < 0.01);
    let estimates: Vec<Vec<f64>> = (0..24)
        .map(|seed| fit_nuisances(&generate_dataset(&params, 50_000, 300 + seed), &FitRecipe::default()).unwrap().lambda().to_vec())
        .collect();
    let k = estimates.len() as f64;
    for j in 0..3 {
        let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / k;
        let sd = (estimates.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        assert!((mean - truth[j]).abs() <= 4.0 * sd / k.sqrt(), "lambda{j}: mean {mean} vs {} (sd {sd})", truth[j]);
    }
}

#[test]
fn monte_carlo_is_a_pure_function_of_the_config() {
    let mut config = figure_scenario('e').unwrap();
    config.n = 500;
    config.replicates = 3;
    config.m_imputations = 5;
    config.estimators = vec![EstimatorKind::Dr, EstimatorKind::Mcdlm, EstimatorKind::Full];
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_monte_carlo(&config).unwrap())
    };
    let once = run(1);
    assert_eq!(once.rows.len(), 9);
    assert_eq!(once, run(1));
    assert_eq!(once, run(4));

    let mut single = config.clone();
    single.replicates = 1;
    let a = run_monte_carlo(&single).unwrap();
    assert_eq!(a, run_monte_carlo(&single).unwrap());
    assert_eq!(a.rows[..], once.rows[..3]);
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let mut config = figure_scenario('a').unwrap();
    config.replicates = 0;
    assert!(run_monte_carlo(&config).unwrap_err().contains("replicates"));
    let mut config = figure_scenario('a').unwrap();
    config.n = 50;
    assert!(run_monte_carlo(&config).is_err());
}
