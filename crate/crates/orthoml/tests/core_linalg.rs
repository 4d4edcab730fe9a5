use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use orthoml::linalg::*;
use orthoml::Error;
use proptest::prelude::*;

fn design(rows: &[&[f64]]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

#[test]
fn ols_mean_of_y() {
    let fit = ols_fit(&DMatrix::from_element(3, 1, 1.0), &[1.0, 2.0, 3.0], None).unwrap();
    assert_abs_diff_eq!(fit.coefficients[0], 2.0, epsilon = 1e-12);
}

#[test]
fn ols_three_point_closed_form() {
    let x = design(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0]]);
    let fit = ols_fit(&x, &[1.0, 2.0, 4.0], None).unwrap();
    assert_abs_diff_eq!(fit.coefficients[0], 5.0 / 6.0, epsilon = 1e-12);
    assert_abs_diff_eq!(fit.coefficients[1], 1.5, epsilon = 1e-12);
}

#[test]
fn ols_perfect_fit() {
    let x = design(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 3.0], &[1.0, -2.0]]);
    let y: Vec<f64> = (0..4).map(|i| 2.0 - 0.5 * x[(i, 1)]).collect();
    let fit = ols_fit(&x, &y, None).unwrap();
    assert!(fit.residuals.iter().all(|e| e.abs() < 1e-12));
    assert_abs_diff_eq!(fit.r2_sample(), 1.0, epsilon = 1e-12);
}

#[test]
fn ols_rank_deficient_fails_loudly() {
    let x = design(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
    assert!(matches!(ols_fit(&x, &[1.0, 2.0, 3.0], None), Err(Error::RankDeficient { .. })));
    assert!(ols_fit_min_norm(&x, &[1.0, 2.0, 3.0], None).is_ok());
    assert!(ols_fit(&DMatrix::from_element(3, 1, 1.0), &[1.0, 2.0, 3.0], Some(&[0.0; 3])).is_err());
}

#[test]
fn sandwich_hand_values() {
    // Intercept only, n = 2, residuals ±1: Σε̂²/n² = 0.5 and h = 1/2.
    let x = DMatrix::from_element(2, 1, 1.0);
    let fit = ols_fit(&x, &[2.0, 0.0], None).unwrap();
    let hc0 = robust_variance(&fit, HcKind::Hc0).unwrap();
    assert_abs_diff_eq!(hc0.matrix[(0, 0)], 0.5, epsilon = 1e-12);
    let hc1 = robust_variance(&fit, HcKind::Hc1).unwrap();
    assert_abs_diff_eq!(hc1.matrix[(0, 0)], 1.0, epsilon = 1e-12);
    let hc3 = robust_variance(&fit, HcKind::Hc3).unwrap();
    assert_abs_diff_eq!(hc3.matrix[(0, 0)], 2.0, epsilon = 1e-12);
}

#[test]
fn partial_out_examples() {
    let v = [1.0, 4.0, 7.0, 0.0];
    let r = partial_out_vec(&v, &DMatrix::from_element(4, 1, 1.0), None).unwrap();
    for (a, b) in r.iter().zip(&v) {
        assert_abs_diff_eq!(*a, b - 3.0, epsilon = 1e-12);
    }
    // Orthogonal to the design already: unchanged.
    let w = design(&[&[1.0], &[-1.0], &[1.0], &[-1.0]]);
    let v = [1.0, 1.0, -1.0, -1.0];
    let r = partial_out_vec(&v, &w, None).unwrap();
    for (a, b) in r.iter().zip(&v) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }
}

#[test]
fn fwl_on_three_points() {
    let d = [0.0, 1.0, 2.0];
    let y = [1.0, 2.0, 4.0];
    let w = DMatrix::from_element(3, 1, 1.0);
    let yt = partial_out_vec(&y, &w, None).unwrap();
    let dt = partial_out_vec(&d, &w, None).unwrap();
    let slope = yt.iter().zip(&dt).map(|(a, b)| a * b).sum::<f64>() / dt.iter().map(|b| b * b).sum::<f64>();
    let full = ols_fit(&with_intercept(&column(&d)), &y, None).unwrap();
    assert_abs_diff_eq!(slope, full.coefficients[1], epsilon = 1e-12);
}

#[test]
fn predictive_metrics_examples() {
    let y = [1.0, 2.0, 3.0];
    let m = predictive_metrics(&y, &y, 1, None).unwrap();
    assert_eq!(m.mse_test, 0.0);
    assert_eq!(m.r2_test, 1.0);
    let yt = [1.0, -1.0, 1.0, -1.0];
    let m = predictive_metrics(&yt, &[0.0; 4], 2, None).unwrap();
    assert_abs_diff_eq!(m.mse_adjusted, 2.0, epsilon = 1e-12);
    assert!(matches!(predictive_metrics(&yt, &[0.0; 4], 4, None), Err(Error::DegreesOfFreedom { .. })));
}

fn data(n: usize, p: usize) -> impl Strategy<Value = (DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-3.0f64..3.0, n * p),
        prop::collection::vec(-5.0f64..5.0, n),
        prop::collection::vec(0.1f64..3.0, n),
    )
        .prop_map(move |(xs, y, w)| (DMatrix::from_vec(n, p, xs), y, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residuals_orthogonal_to_design((x, y, w) in (8usize..40, 1usize..5).prop_flat_map(|(n, p)| data(n, p)), weighted in any::<bool>()) {
        let z = with_intercept(&x);
        let wt = weighted.then_some(w.as_slice());
        if let Ok(fit) = ols_fit(&z, &y, wt) {
            let n = y.len() as f64;
            for j in 0..z.ncols() {
                let g: f64 = (0..y.len()).map(|i| wt.map_or(1.0, |w| w[i]) * z[(i, j)] * fit.residuals[i]).sum::<f64>() / n;
                prop_assert!(g.abs() <= 1e-8, "column {j}: {g}");
            }
        }
    }

    #[test]
    fn anova_with_intercept((x, y, _) in (8usize..40, 1usize..5).prop_flat_map(|(n, p)| data(n, p))) {
        let fit = ols_fit(&with_intercept(&x), &y, None).unwrap();
        let n = y.len() as f64;
        let ey2 = y.iter().map(|v| v * v).sum::<f64>() / n;
        let fit2 = fit.fitted.iter().map(|v| v * v).sum::<f64>() / n;
        let res2 = fit.residuals.iter().map(|v| v * v).sum::<f64>() / n;
        prop_assert!((ey2 - fit2 - res2).abs() <= 1e-8 * (1.0 + ey2));
    }

    #[test]
    fn fwl_equivalence((x, y, _) in (8usize..50, 2usize..6).prop_flat_map(|(n, p)| data(n, p))) {
        let d: Vec<f64> = x.column(0).iter().cloned().collect();
        let w = with_intercept(&x.columns(1, x.ncols() - 1).into_owned());
        let joint = ols_fit(&hstack(&[&column(&d), &w]), &y, None).unwrap();
        let yt = partial_out_vec(&y, &w, None).unwrap();
        let dt = partial_out_vec(&d, &w, None).unwrap();
        let slope = yt.iter().zip(&dt).map(|(a, b)| a * b).sum::<f64>() / dt.iter().map(|b| b * b).sum::<f64>();
        prop_assert!((slope - joint.coefficients[0]).abs() <= 1e-8 * (1.0 + slope.abs()));
    }

    #[test]
    fn hc_relations((x, y, _) in (8usize..40, 1usize..4).prop_flat_map(|(n, p)| data(n, p))) {
        let fit = ols_fit(&with_intercept(&x), &y, None).unwrap();
        let (n, p) = (fit.n as f64, fit.p as f64);
        let h0 = robust_variance(&fit, HcKind::Hc0).unwrap();
        let h1 = robust_variance(&fit, HcKind::Hc1).unwrap();
        for j in 0..fit.p {
            prop_assert!((h1.matrix[(j, j)] - h0.matrix[(j, j)] * n / (n - p)).abs() <= 1e-10 * h1.matrix[(j, j)].abs().max(1e-300));
        }
        if let Ok(h3) = robust_variance(&fit, HcKind::Hc3) {
            for j in 0..fit.p {
                prop_assert!(h3.matrix[(j, j)] >= h0.matrix[(j, j)] - 1e-14);
            }
        }
    }
}
