//! Inference on low-dimensional targets in high-dimensional linear models.
//!
//! Every procedure partials the controls out of the outcome and the target
//! with a Lasso (or selects controls with one) and then runs a residual-on-
//! residual regression with a heteroskedasticity-robust variance.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::linalg::{column, hstack, ols_fit, robust_variance, select_columns, with_intercept, HcKind};
use crate::penalized::{lasso_fit, lasso_with_rule, plugin_lambda, LambdaRule, PluginOptions};
use crate::stats::{correlation, max_gaussian_quantile, qnorm, two_sided_p, BAND_DRAWS};

/// Estimates, marginal and simultaneous inference for one or more targets.
#[derive(Debug, Clone, Serialize)]
pub struct TargetInference {
    pub method: String,
    pub estimates: Vec<f64>,
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    /// Marginal two-sided p-values for `α_ℓ = 0`.
    pub p_values: Vec<f64>,
    pub band: Vec<(f64, f64)>,
    /// Simultaneous critical value (equals the pointwise one for one target).
    pub critical: f64,
    /// Joint asymptotic variance `V̂` (not divided by `n`).
    #[serde(skip)]
    pub variance: DMatrix<f64>,
    #[serde(skip)]
    pub y_resid: Vec<Vec<f64>>,
    #[serde(skip)]
    pub d_resid: Vec<Vec<f64>>,
    /// Indices of the controls kept by selection-based methods.
    pub selected: Vec<usize>,
    pub n: usize,
    pub alpha: f64,
    pub warnings: Vec<String>,
}

impl TargetInference {
    fn build(method: &str, estimates: Vec<f64>, variance: DMatrix<f64>, n: usize, alpha: f64, critical: f64) -> Self {
        let z = qnorm(1.0 - alpha / 2.0);
        let se: Vec<f64> = (0..estimates.len()).map(|j| (variance[(j, j)].max(0.0) / n as f64).sqrt()).collect();
        let ci = estimates.iter().zip(&se).map(|(a, s)| (a - z * s, a + z * s)).collect();
        let band = estimates.iter().zip(&se).map(|(a, s)| (a - critical * s, a + critical * s)).collect();
        let p_values = estimates.iter().zip(&se).map(|(a, s)| two_sided_p(a / s)).collect();
        TargetInference {
            method: method.to_string(),
            estimates,
            se,
            ci,
            p_values,
            band,
            critical,
            variance,
            y_resid: Vec::new(),
            d_resid: Vec::new(),
            selected: Vec::new(),
            n,
            alpha,
            warnings: Vec::new(),
        }
    }

    pub fn estimate(&self) -> f64 {
        self.estimates[0]
    }

    /// Whether the pointwise interval of target `j` contains `v`.
    pub fn covers(&self, j: usize, v: f64) -> bool {
        self.ci[j].0 <= v && v <= self.ci[j].1
    }

    /// Whether the band contains every entry of `v`.
    pub fn band_covers(&self, v: &[f64]) -> bool {
        self.band.iter().zip(v).all(|(b, x)| b.0 <= *x && *x <= b.1)
    }
}

fn lasso_residual(w: &DMatrix<f64>, v: &[f64], rule: &LambdaRule) -> Result<Vec<f64>> {
    if w.ncols() == 0 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        return Ok(v.iter().map(|x| x - m).collect());
    }
    let fit = lasso_with_rule(w, v, rule)?;
    let pred = fit.predict(w);
    Ok(v.iter().zip(&pred).map(|(a, b)| a - b).collect())
}

fn check_resid_variation(dt: &[f64], d: &[f64]) -> Result<f64> {
    let n = d.len() as f64;
    let ed2 = dt.iter().map(|v| v * v).sum::<f64>() / n;
    let raw = d.iter().map(|v| v * v).sum::<f64>() / n;
    if ed2 == 0.0 || ed2 < 1e-10 * raw {
        return Err(Error::WeakResidualVariation);
    }
    Ok(ed2)
}

/// Double Lasso for one target `d`.
pub fn double_lasso(y: &[f64], d: &[f64], w: &DMatrix<f64>, rule: &LambdaRule, alpha: f64) -> Result<TargetInference> {
    let n = y.len();
    if n <= 2 {
        return Err(Error::InvalidInput("double Lasso needs n > 2".into()));
    }
    check_len("d", d.len(), n)?;
    check_len("W rows", w.nrows(), n)?;
    let yt = lasso_residual(w, y, rule)?;
    let dt = lasso_residual(w, d, rule)?;
    let ed2 = check_resid_variation(&dt, d)?;
    let a = dt.iter().zip(&yt).map(|(u, v)| u * v).sum::<f64>() / n as f64 / ed2;
    let meat = (0..n).map(|i| (dt[i] * (yt[i] - a * dt[i])).powi(2)).sum::<f64>() / n as f64;
    let v = DMatrix::from_element(1, 1, meat / (ed2 * ed2));
    let mut out = TargetInference::build("double_lasso", vec![a], v, n, alpha, qnorm(1.0 - alpha / 2.0));
    out.y_resid = vec![yt];
    out.d_resid = vec![dt];
    Ok(out)
}

/// One-by-one Double Lasso for the columns of `targets`, with the joint
/// variance and a simultaneous band from the max of correlated Gaussians.
pub fn many_targets(
    y: &[f64],
    targets: &DMatrix<f64>,
    controls: &DMatrix<f64>,
    rule: &LambdaRule,
    alpha: f64,
    seed: u64,
) -> Result<TargetInference> {
    let n = y.len();
    let p1 = targets.ncols();
    if p1 == 0 {
        return Err(Error::InvalidInput("no targets".into()));
    }
    check_len("targets rows", targets.nrows(), n)?;
    check_len("controls rows", controls.nrows(), n)?;
    let fits: Vec<TargetInference> = (0..p1)
        .into_par_iter()
        .map(|l| {
            let others: Vec<usize> = (0..p1).filter(|k| *k != l).collect();
            let w = hstack(&[&select_columns(targets, &others), controls]);
            let d: Vec<f64> = targets.column(l).iter().cloned().collect();
            double_lasso(y, &d, &w, rule, alpha)
        })
        .collect::<Result<_>>()?;
    let estimates: Vec<f64> = fits.iter().map(|f| f.estimates[0]).collect();
    let dt: Vec<&[f64]> = fits.iter().map(|f| f.d_resid[0].as_slice()).collect();
    let eps: Vec<Vec<f64>> = fits
        .iter()
        .map(|f| (0..n).map(|i| f.y_resid[0][i] - f.estimates[0] * f.d_resid[0][i]).collect())
        .collect();
    let ed2: Vec<f64> = dt.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>() / n as f64).collect();
    let mut v = DMatrix::zeros(p1, p1);
    for a in 0..p1 {
        for b in a..p1 {
            let m = (0..n).map(|i| dt[a][i] * dt[b][i] * eps[a][i] * eps[b][i]).sum::<f64>() / n as f64;
            v[(a, b)] = m / (ed2[a] * ed2[b]);
            v[(b, a)] = v[(a, b)];
        }
    }
    let critical = max_gaussian_quantile(&correlation(&v), alpha, true, BAND_DRAWS, seed);
    let mut out = TargetInference::build("many_targets", estimates, v, n, alpha, critical);
    out.y_resid = fits.iter().map(|f| f.y_resid[0].clone()).collect();
    out.d_resid = fits.into_iter().map(|f| f.d_resid[0].clone()).collect();
    Ok(out)
}

fn lasso_support(w: &DMatrix<f64>, v: &[f64], rule: &LambdaRule) -> Result<Vec<usize>> {
    if w.ncols() == 0 {
        return Ok(Vec::new());
    }
    Ok(lasso_with_rule(w, v, rule)?.active)
}

fn ols_target(method: &str, y: &[f64], d: &[f64], w: &DMatrix<f64>, selected: Vec<usize>, alpha: f64) -> Result<TargetInference> {
    let n = y.len();
    let design = with_intercept(&hstack(&[&column(d), &select_columns(w, &selected)]));
    let fit = ols_fit(&design, y, None)?;
    let vc = robust_variance(&fit, HcKind::Hc0)?;
    let v = DMatrix::from_element(1, 1, vc.matrix[(1, 1)] * n as f64);
    let mut out = TargetInference::build(method, vec![fit.coefficients[1]], v, n, alpha, qnorm(1.0 - alpha / 2.0));
    out.selected = selected;
    Ok(out)
}

/// Double selection: OLS of `y` on `d` and the union of the controls
/// selected by Lasso fits of `y` and of `d` on `W`.
pub fn double_selection(y: &[f64], d: &[f64], w: &DMatrix<f64>, rule: &LambdaRule, alpha: f64) -> Result<TargetInference> {
    check_len("d", d.len(), y.len())?;
    check_len("W rows", w.nrows(), y.len())?;
    let mut sel = lasso_support(w, y, rule)?;
    sel.extend(lasso_support(w, d, rule)?);
    sel.sort_unstable();
    sel.dedup();
    ols_target("double_selection", y, d, w, sel, alpha)
}

/// Desparsified Lasso from given coefficient vectors: `β` from the outcome
/// regression on `(d, W)` (d-coefficient first) and `γ` from `d` on `W`.
pub fn desparsified_from_coefficients(
    y: &[f64],
    d: &[f64],
    w: &DMatrix<f64>,
    beta_intercept: f64,
    beta: &[f64],
    gamma_intercept: f64,
    gamma: &[f64],
    alpha: f64,
) -> Result<TargetInference> {
    let n = y.len();
    check_len("β", beta.len(), w.ncols() + 1)?;
    check_len("γ", gamma.len(), w.ncols())?;
    let lin = |i: usize, c: &[f64]| (0..w.ncols()).map(|j| c[j] * w[(i, j)]).sum::<f64>();
    let dt: Vec<f64> = (0..n).map(|i| d[i] - gamma_intercept - lin(i, gamma)).collect();
    let yr: Vec<f64> = (0..n).map(|i| y[i] - beta_intercept - lin(i, &beta[1..])).collect();
    let jd = (0..n).map(|i| d[i] * dt[i]).sum::<f64>() / n as f64;
    let raw = d.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if jd.abs() <= 1e-10 * raw || jd == 0.0 {
        return Err(Error::WeakResidualVariation);
    }
    let a = (0..n).map(|i| yr[i] * dt[i]).sum::<f64>() / n as f64 / jd;
    let meat = (0..n).map(|i| (dt[i] * (yr[i] - a * d[i])).powi(2)).sum::<f64>() / n as f64;
    let v = DMatrix::from_element(1, 1, meat / (jd * jd));
    let mut out = TargetInference::build("desparsified_lasso", vec![a], v, n, alpha, qnorm(1.0 - alpha / 2.0));
    out.y_resid = vec![yr];
    out.d_resid = vec![dt];
    Ok(out)
}

/// Desparsified Lasso with `D̃ = D − γ̂'W` acting as the instrument.
pub fn desparsified_lasso(y: &[f64], d: &[f64], w: &DMatrix<f64>, rule: &LambdaRule, alpha: f64) -> Result<TargetInference> {
    check_len("d", d.len(), y.len())?;
    check_len("W rows", w.nrows(), y.len())?;
    let full = hstack(&[&column(d), w]);
    let bfit = lasso_with_rule(&full, y, rule)?;
    let (gi, g) = if w.ncols() == 0 {
        (d.iter().sum::<f64>() / d.len() as f64, Vec::new())
    } else {
        let f = lasso_with_rule(w, d, rule)?;
        (f.intercept, f.coefficients)
    };
    desparsified_from_coefficients(y, d, w, bfit.intercept, &bfit.coefficients, gi, &g, alpha)
}

/// Single-selection estimator: Lasso of `y` on `(d, W)` with `d` left
/// unpenalized, then OLS on `d` and the selected controls. Not orthogonal;
/// kept to demonstrate its bias.
pub fn naive_single_selection(y: &[f64], d: &[f64], w: &DMatrix<f64>, opts: PluginOptions, alpha: f64) -> Result<TargetInference> {
    check_len("d", d.len(), y.len())?;
    check_len("W rows", w.nrows(), y.len())?;
    let selected = if w.ncols() == 0 {
        Vec::new()
    } else {
        let full = hstack(&[&column(d), w]);
        let pl = plugin_lambda(&full, y, opts)?;
        let mut load = pl.loadings.clone();
        load[0] = 0.0;
        let fit = lasso_fit(&full, y, pl.lambda, Some(&load))?;
        fit.active.iter().filter(|j| **j > 0).map(|j| j - 1).collect()
    };
    let mut out = ols_target("naive_single_selection", y, d, w, selected, alpha)?;
    out.warnings.push("single selection is not Neyman-orthogonal; inference is invalid".into());
    Ok(out)
}

/// Center each column of `x` before forming interactions with a target.
pub fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for j in 0..x.ncols() {
        let m = x.column(j).mean();
        for v in c.column_mut(j).iter_mut() {
            *v -= m;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn demeaned_slope(y: &[f64], d: &[f64]) -> f64 {
        let (my, md) = (y.iter().sum::<f64>() / y.len() as f64, d.iter().sum::<f64>() / d.len() as f64);
        (0..y.len()).map(|i| (d[i] - md) * (y[i] - my)).sum::<f64>() / (0..y.len()).map(|i| (d[i] - md).powi(2)).sum::<f64>()
    }

    #[test]
    fn empty_controls_give_slope() {
        let y = [1.0, 3.0, 2.0, 6.0, 5.0];
        let d = [0.0, 1.0, 1.0, 3.0, 2.0];
        let w = DMatrix::zeros(5, 0);
        let r = double_lasso(&y, &d, &w, &LambdaRule::default(), 0.05).unwrap();
        assert_abs_diff_eq!(r.estimate(), demeaned_slope(&y, &d), epsilon = 1e-12);
        let r = naive_single_selection(&y, &d, &w, PluginOptions::default(), 0.05).unwrap();
        assert_abs_diff_eq!(r.estimate(), demeaned_slope(&y, &d), epsilon = 1e-10);
        let r = double_selection(&y, &d, &w, &LambdaRule::default(), 0.05).unwrap();
        assert_abs_diff_eq!(r.estimate(), demeaned_slope(&y, &d), epsilon = 1e-10);
    }

    #[test]
    fn desparsified_trivial_coefficients() {
        let y = [1.0, 2.0, 0.5, 3.0];
        let d = [1.0, -1.0, 2.0, 0.5];
        let w = DMatrix::from_vec(4, 1, vec![0.3, 0.1, -0.2, 0.4]);
        let r = desparsified_from_coefficients(&y, &d, &w, 0.0, &[0.0, 0.0], 0.0, &[0.0], 0.05).unwrap();
        let eyd: f64 = y.iter().zip(&d).map(|(a, b)| a * b).sum();
        let ed2: f64 = d.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(r.estimate(), eyd / ed2, epsilon = 1e-12);
    }

    #[test]
    fn constant_target_rejected() {
        let y = [1.0, 2.0, 0.5, 3.0];
        let w = DMatrix::from_vec(4, 1, vec![0.3, 0.1, -0.2, 0.4]);
        assert!(matches!(
            desparsified_lasso(&y, &[2.0; 4], &w, &LambdaRule::Fixed(0.0), 0.05),
            Err(Error::WeakResidualVariation)
        ));
        assert!(matches!(double_lasso(&y, &[2.0; 4], &w, &LambdaRule::Fixed(0.0), 0.05), Err(Error::WeakResidualVariation)));
    }

    #[test]
    fn single_target_band_is_pointwise() {
        let y = [1.0, 3.0, 2.0, 6.0, 5.0];
        let d = DMatrix::from_vec(5, 1, vec![0.0, 1.0, 1.0, 3.0, 2.0]);
        let r = many_targets(&y, &d, &DMatrix::zeros(5, 0), &LambdaRule::default(), 0.05, 1).unwrap();
        assert_eq!(r.critical, qnorm(0.975));
        assert_eq!(r.band, r.ci);
    }
}
