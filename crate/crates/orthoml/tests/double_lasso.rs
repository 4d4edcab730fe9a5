use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use orthoml::double_lasso::*;
use orthoml::linalg::{column, hstack, ols_fit, with_intercept};
use orthoml::penalized::{LambdaRule, PluginOptions};
use orthoml::rng;
use orthoml::sim::generate;
use orthoml::stats::{median, qnorm};
use orthoml::Error;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, "test", 0);
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut r))
}

fn demeaned_slope(y: &[f64], d: &[f64]) -> f64 {
    let n = y.len() as f64;
    let (my, md) = (y.iter().sum::<f64>() / n, d.iter().sum::<f64>() / n);
    let num: f64 = y.iter().zip(d).map(|(a, b)| (a - my) * (b - md)).sum();
    num / d.iter().map(|b| (b - md).powi(2)).sum::<f64>()
}

fn ols_coef_of_d(y: &[f64], d: &[f64], w: &DMatrix<f64>) -> f64 {
    ols_fit(&with_intercept(&hstack(&[&column(d), w])), y, None).unwrap().coefficients[1]
}

fn small_design(seed: u64) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let n = 80;
    let w = gaussian(n, 4, seed);
    let e = gaussian(n, 2, seed + 1);
    let d: Vec<f64> = (0..n).map(|i| 0.7 * w[(i, 0)] - 0.4 * w[(i, 2)] + e[(i, 0)]).collect();
    let y: Vec<f64> = (0..n).map(|i| 1.5 * d[i] + w[(i, 0)] + 0.3 * w[(i, 3)] + e[(i, 1)]).collect();
    (y, d, w)
}

#[test]
fn no_controls_gives_demeaned_slope() {
    let (y, d, _) = small_design(1);
    let w = DMatrix::zeros(y.len(), 0);
    let rule = LambdaRule::default();
    let r = double_lasso(&y, &d, &w, &rule, 0.05).unwrap();
    assert_abs_diff_eq!(r.estimate(), demeaned_slope(&y, &d), epsilon = 1e-12);
    let naive = naive_single_selection(&y, &d, &w, PluginOptions::default(), 0.05).unwrap();
    assert_abs_diff_eq!(naive.estimate(), demeaned_slope(&y, &d), epsilon = 1e-10);
    assert!(!naive.warnings.is_empty());
}

#[test]
fn zero_penalty_matches_full_ols() {
    for seed in 0..5 {
        let (y, d, w) = small_design(seed * 10);
        let ols = ols_coef_of_d(&y, &d, &w);
        let rule = LambdaRule::Fixed(0.0);
        for r in [
            double_lasso(&y, &d, &w, &rule, 0.05).unwrap(),
            double_selection(&y, &d, &w, &rule, 0.05).unwrap(),
            desparsified_lasso(&y, &d, &w, &rule, 0.05).unwrap(),
        ] {
            assert_abs_diff_eq!(r.estimate(), ols, epsilon = 1e-8);
        }
    }
}

#[test]
fn controls_orthogonal_in_sample_select_nothing() {
    // Columns of W are orthogonal contrasts; y and d are orthogonal to them.
    let n = 8;
    let w = DMatrix::from_fn(n, 2, |i, j| if j == 0 { [1.0, -1.0][i % 2] } else { [1.0, 1.0, -1.0, -1.0][i % 4] });
    let d = [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0];
    let d: Vec<f64> = (0..n).map(|i| if i < 4 { d[i] } else { 3.0 - d[i] }).collect();
    for j in 0..2 {
        assert_abs_diff_eq!((0..n).map(|i| w[(i, j)] * d[i]).sum::<f64>(), 0.0, epsilon = 1e-12);
    }
    let y: Vec<f64> = d.iter().map(|v| 2.0 * v).collect();
    let r = double_lasso(&y, &d, &w, &LambdaRule::default(), 0.05).unwrap();
    assert_abs_diff_eq!(r.estimate(), demeaned_slope(&y, &d), epsilon = 1e-10);
    let r = double_selection(&y, &d, &w, &LambdaRule::default(), 0.05).unwrap();
    assert!(r.selected.is_empty());
}

#[test]
fn weak_residual_variation() {
    let w = gaussian(30, 2, 3);
    let d: Vec<f64> = (0..30).map(|i| 2.0 * w[(i, 0)] - w[(i, 1)] + 1.0).collect();
    let y: Vec<f64> = d.iter().map(|v| v + 1.0).collect();
    let r = double_lasso(&y, &d, &w, &LambdaRule::Fixed(0.0), 0.05);
    assert!(matches!(r, Err(Error::WeakResidualVariation)));
    let constant = vec![4.0; 30];
    let r = desparsified_lasso(&y, &constant, &w, &LambdaRule::Fixed(0.0), 0.05);
    assert!(r.is_err());
}

#[test]
fn single_target_critical_value_is_normal() {
    let (y, d, w) = small_design(7);
    let r = many_targets(&y, &column(&d), &w, &LambdaRule::default(), 0.05, 1).unwrap();
    assert_abs_diff_eq!(r.critical, qnorm(0.975), epsilon = 1e-12);
    let single = double_lasso(&y, &d, &w, &LambdaRule::default(), 0.05).unwrap();
    assert_abs_diff_eq!(r.estimate(), single.estimate(), epsilon = 1e-12);
}

#[test]
fn two_independent_targets_critical_value() {
    // P(max(|Z1|, |Z2|) <= c) = (2Φ(c) − 1)² for independent components.
    let exact = qnorm((1.0 + 0.95f64.sqrt()) / 2.0);
    assert_abs_diff_eq!(exact, 2.2365, epsilon = 1e-4);
    let c = orthoml::stats::max_gaussian_quantile(&DMatrix::identity(2, 2), 0.05, true, 100_000, 11);
    assert!((c - exact).abs() < 0.02, "{c}");
    let ones = DMatrix::from_element(2, 2, 1.0);
    let c = orthoml::stats::max_gaussian_quantile(&ones, 0.05, true, 100_000, 11);
    assert_abs_diff_eq!(c, qnorm(0.975), epsilon = 1e-12);
}

#[test]
fn double_selection_examples() {
    let (y, d, w) = small_design(21);
    // Huge penalty: nothing selected, plain OLS of y on d.
    let none = double_selection(&y, &d, &w, &LambdaRule::Fixed(1e9), 0.05).unwrap();
    assert!(none.selected.is_empty());
    assert_abs_diff_eq!(none.estimate(), demeaned_slope(&y, &d), epsilon = 1e-10);
    let all = double_selection(&y, &d, &w, &LambdaRule::Fixed(0.0), 0.05).unwrap();
    assert_eq!(all.selected, vec![0, 1, 2, 3]);

    // w1 drives y only, w2 drives d only: the union is {w1, w2}.
    let n = 400;
    let base = gaussian(n, 4, 99);
    let d: Vec<f64> = (0..n).map(|i| 3.0 * base[(i, 1)] + 0.5 * base[(i, 2)]).collect();
    let y: Vec<f64> = (0..n).map(|i| d[i] + 3.0 * base[(i, 0)] + 0.5 * base[(i, 3)]).collect();
    let w = base.columns(0, 2).into_owned();
    let r = double_selection(&y, &d, &w, &LambdaRule::default(), 0.05).unwrap();
    assert_eq!(r.selected, vec![0, 1]);
    assert_abs_diff_eq!(r.estimate(), ols_coef_of_d(&y, &d, &w), epsilon = 1e-10);
}

#[test]
fn desparsified_with_zero_coefficients() {
    let (y, d, w) = small_design(5);
    let beta = vec![0.0; w.ncols() + 1];
    let gamma = vec![0.0; w.ncols()];
    let r = desparsified_from_coefficients(&y, &d, &w, 0.0, &beta, 0.0, &gamma, 0.05).unwrap();
    let eyd: f64 = y.iter().zip(&d).map(|(a, b)| a * b).sum();
    let edd: f64 = d.iter().map(|b| b * b).sum();
    assert_abs_diff_eq!(r.estimate(), eyd / edd, epsilon = 1e-12);
}

#[test]
fn naive_omits_confounder_that_only_predicts_d() {
    // d = 2w + u and y = d + 0.1w + e. The outcome Lasso cannot see the weak
    // direct effect of w, so the naive fit is the short regression, whose
    // population slope is 1 + 0.1·Cov(d, w)/Var(d) = 1 + 0.1·2/5 = 1.04.
    let n = 200;
    let (mut naive_sum, mut dl_sum) = (0.0, 0.0);
    for rep in 0..200 {
        let g = gaussian(n, 3, 500 + rep);
        let w = g.columns(0, 1).into_owned();
        let d: Vec<f64> = (0..n).map(|i| 2.0 * g[(i, 0)] + g[(i, 1)]).collect();
        let y: Vec<f64> = (0..n).map(|i| d[i] + 0.1 * g[(i, 0)] + g[(i, 2)]).collect();
        let naive = naive_single_selection(&y, &d, &w, PluginOptions::default(), 0.05).unwrap();
        if naive.selected.is_empty() {
            assert_abs_diff_eq!(naive.estimate(), demeaned_slope(&y, &d), epsilon = 1e-10);
        }
        naive_sum += naive.estimate();
        dl_sum += double_lasso(&y, &d, &w, &LambdaRule::default(), 0.05).unwrap().estimate();
    }
    let (naive, dl) = (naive_sum / 200.0, dl_sum / 200.0);
    assert!((naive - 1.04).abs() < 0.01, "naive mean {naive}");
    assert!((dl - 1.0).abs() < 0.01, "double Lasso mean {dl}");
}

#[test]
fn naive_undercovers_on_sparse_confounding_design() {
    let mut cover = 0;
    let mut est = Vec::new();
    for rep in 0..100 {
        let s = generate("example_4_3_1", 100, rep).unwrap();
        let r = naive_single_selection(&s.y, &s.d, &s.x, PluginOptions::default(), 0.05).unwrap();
        cover += r.covers(0, 1.0) as usize;
        est.push(r.estimate() - 1.0);
    }
    assert!((cover as f64) / 100.0 < 0.80, "naive coverage {cover}%");
    assert!(median(&est) > 0.5);
}

#[test]
fn simultaneous_band_over_null_targets() {
    let (n, p1, reps) = (1000, 20, 1000);
    let (mut band, mut point) = (0usize, vec![0usize; p1]);
    for rep in 0..reps {
        let g = gaussian(n, p1 + 6, 1_000 + rep as u64);
        let controls = g.columns(p1, 5).into_owned();
        let targets = DMatrix::from_fn(n, p1, |i, j| g[(i, j)] + 0.5 * controls[(i, j % 5)]);
        let y: Vec<f64> = (0..n).map(|i| controls[(i, 0)] - 0.5 * controls[(i, 1)] + g[(i, p1 + 5)]).collect();
        let r = many_targets(&y, &targets, &controls, &LambdaRule::default(), 0.05, rep as u64).unwrap();
        for j in 0..p1 {
            assert!(r.band[j].0 <= r.ci[j].0 && r.ci[j].1 <= r.band[j].1);
            point[j] += r.covers(j, 0.0) as usize;
        }
        band += r.band_covers(&[0.0; 20]) as usize;
    }
    let rate = band as f64 / reps as f64;
    assert!((0.90..=0.98).contains(&rate), "band coverage {rate}");
    // Twenty binomial rates with sd 0.007 each: the [0.93, 0.97] window is
    // applied to their average, and each target gets a three-sd margin.
    let avg = point.iter().sum::<usize>() as f64 / (reps * p1) as f64;
    assert!((0.93..=0.97).contains(&avg), "average pointwise coverage {avg}");
    for (j, c) in point.iter().enumerate() {
        let rate = *c as f64 / reps as f64;
        assert!((0.92..=0.98).contains(&rate), "target {j}: pointwise coverage {rate}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn band_contains_pointwise_and_variance_psd(seed in 0u64..10_000, p1 in 2usize..5) {
        let n = 60;
        let g = gaussian(n, p1 + 4, seed);
        let targets = g.columns(0, p1).into_owned();
        let controls = g.columns(p1, 3).into_owned();
        let y: Vec<f64> = (0..n).map(|i| targets[(i, 0)] + controls[(i, 0)] + g[(i, p1 + 3)]).collect();
        let r = many_targets(&y, &targets, &controls, &LambdaRule::default(), 0.1, seed).unwrap();
        for j in 0..p1 {
            prop_assert!(r.band[j].0 <= r.ci[j].0 + 1e-12 && r.ci[j].1 <= r.band[j].1 + 1e-12);
        }
        let v = &r.variance;
        prop_assert!((v - v.transpose()).amax() <= 1e-12 * v.amax());
        let eig = nalgebra::SymmetricEigen::new(v.clone());
        prop_assert!(eig.eigenvalues.iter().all(|e| *e >= -1e-10 * v.amax()));
    }

    #[test]
    fn adaptivity_at_zero_penalty(seed in 0u64..10_000) {
        let (y, d, w) = small_design(seed);
        let ols = ols_coef_of_d(&y, &d, &w);
        let rule = LambdaRule::Fixed(0.0);
        let a = double_lasso(&y, &d, &w, &rule, 0.05).unwrap().estimate();
        let b = double_selection(&y, &d, &w, &rule, 0.05).unwrap().estimate();
        let c = desparsified_lasso(&y, &d, &w, &rule, 0.05).unwrap().estimate();
        for v in [a, b, c] {
            prop_assert!((v - ols).abs() <= 1e-8);
        }
    }
}
