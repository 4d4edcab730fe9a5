//! Diagnostics for unobserved confounding: omitted-variable bounds in terms
//! of partial R², proxy-based identification, and covariate balance.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dml::{cross_fit_nuisances, plm_parts, DmlOptions, DmlResult, NuisanceTask, PlmScore, Score};
use crate::error::{check_len, Error, Result};
use crate::learners::{CrossFitPlan, Learner};
use crate::linalg::{ols_fit, robust_variance, with_intercept, HcKind};
use crate::stats::chisq_sf;
use crate::weak_id::first_stage_diag;

/// Default contour resolution per axis.
pub const CONTOUR_POINTS: usize = 50;

/// Condition number above which a proxy matrix is rejected.
pub const MAX_CONDITION: f64 = 1e10;

/// Bias bound for the partialled slope under a latent confounder.
#[derive(Debug, Clone, Serialize)]
pub struct OvbBound {
    pub beta: f64,
    pub r2_y: f64,
    pub r2_d: f64,
    /// `Eₙ[(Ỹ − β̂D̃)²]/Eₙ[D̃²]`.
    pub s: f64,
    /// Bound on `|φ|`.
    pub phi: f64,
    pub interval: (f64, f64),
    /// Confidence interval of `β̂` widened by `|φ|` on each side, when `β̂`
    /// came from data.
    pub ci_interval: Option<(f64, f64)>,
    /// `(r2_y, r2_d, |φ|)` rows.
    pub contour: Vec<(f64, f64, f64)>,
    /// Inference on `β̂` when it came from data.
    pub estimate: Option<DmlResult>,
}

impl OvbBound {
    pub fn contour_csv(&self) -> String {
        let mut out = String::from("r2_y,r2_d,phi_bound\n");
        for (a, b, c) in &self.contour {
            out.push_str(&format!("{a},{b},{c}\n"));
        }
        out
    }
}

fn check_r2(v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::BadR2(v));
    }
    Ok(())
}

/// `|φ|` for given partial R² values and scale.
pub fn phi_bound(r2_y: f64, r2_d: f64, s: f64) -> Result<f64> {
    check_r2(r2_y)?;
    check_r2(r2_d)?;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidInput(format!("scale S must be positive, got {s}")));
    }
    Ok((r2_y * r2_d / (1.0 - r2_d) * s).sqrt())
}

/// `|φ| = sqrt(R²_Y·R²_D/(1 − R²_D)·S)` and the interval `β̂ ± |φ|`.
pub fn ovb_bound(beta: f64, r2_y: f64, r2_d: f64, s: f64) -> Result<OvbBound> {
    let phi = phi_bound(r2_y, r2_d, s)?;
    Ok(OvbBound { beta, r2_y, r2_d, s, phi, interval: (beta - phi, beta + phi), ci_interval: None, contour: Vec::new(), estimate: None })
}

/// `points × points` grid of bounds over `[0, r_max]²`.
pub fn contour_grid(s: f64, r_max: f64, points: usize) -> Result<Vec<(f64, f64, f64)>> {
    check_r2(r_max)?;
    let step = if points > 1 { r_max / (points - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(points * points);
    for i in 0..points {
        for j in 0..points {
            let (ry, rd) = (i as f64 * step, j as f64 * step);
            out.push((ry, rd, phi_bound(ry, rd, s)?));
        }
    }
    Ok(out)
}

/// Partially linear DML estimate plus its omitted-variable bound.
#[allow(clippy::too_many_arguments)]
pub fn ovb_from_data(
    y: &[f64],
    d: &[f64],
    x: &DMatrix<f64>,
    learner_l: &dyn Learner,
    learner_m: &dyn Learner,
    plan: &CrossFitPlan,
    opts: DmlOptions,
    r2_y: f64,
    r2_d: f64,
    r_max: f64,
) -> Result<OvbBound> {
    check_len("d", d.len(), y.len())?;
    let score = PlmScore { y, d, x, learner_l, learner_m };
    let eta = cross_fit_nuisances(&score.tasks(), plan, opts.seed, opts.clip)?;
    let (l, m) = (eta.get("l")?, eta.get("m")?);
    let yt: Vec<f64> = y.iter().zip(l).map(|(a, b)| a - b).collect();
    let dt: Vec<f64> = d.iter().zip(m).map(|(a, b)| a - b).collect();
    let mut est = plm_parts(&yt, &dt, d)?.solve("plm", opts.alpha)?;
    est.nuisances = eta.diagnostics.clone();
    let b = est.theta;
    let s = yt.iter().zip(&dt).map(|(u, v)| (u - b * v).powi(2)).sum::<f64>() / dt.iter().map(|v| v * v).sum::<f64>();
    let mut out = ovb_bound(b, r2_y, r2_d, s)?;
    out.contour = contour_grid(s, r_max, CONTOUR_POINTS)?;
    out.ci_interval = Some((est.ci.0 - out.phi, est.ci.1 + out.phi));
    out.estimate = Some(est);
    Ok(out)
}

/// Interventional law from discrete proxies.
#[derive(Debug, Clone, Serialize)]
pub struct ProxyResult {
    /// `p_do[y][d] = p(y : do(d))`.
    pub p_do: Vec<Vec<f64>>,
    /// Raw values left `[0, 1]` by more than the tolerance and were clipped.
    pub clipped: bool,
}

fn check_columns(name: &str, m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        let col = m.column(j);
        if col.iter().any(|v| !(-1e-12..=1.0 + 1e-12).contains(v)) || (col.sum() - 1.0).abs() > 1e-8 {
            return Err(Error::NotADistribution(format!("{name} column {j}")));
        }
    }
    Ok(())
}

/// `p(y : do(d)) = Π(y|d,Q)·Π(S|Q,d)⁻¹·Π(S)`.
///
/// `p_y_given_dq[d]` has rows `y` and columns `q`; `p_s_given_qd[d]` has rows
/// `s` and columns `q`; `p_s` is the marginal of `S`.
pub fn proxy_discrete(p_y_given_dq: &[DMatrix<f64>], p_s_given_qd: &[DMatrix<f64>], p_s: &[f64]) -> Result<ProxyResult> {
    check_len("proxy matrices", p_s_given_qd.len(), p_y_given_dq.len())?;
    let ps = DVector::from_column_slice(p_s);
    check_columns("p(s)", &DMatrix::from_column_slice(p_s.len(), 1, p_s))?;
    let ny = p_y_given_dq.first().map_or(0, |m| m.nrows());
    let mut p_do = vec![vec![0.0; p_y_given_dq.len()]; ny];
    let mut clipped = false;
    for (d, (py, psq)) in p_y_given_dq.iter().zip(p_s_given_qd).enumerate() {
        check_columns("p(y|d,q)", py)?;
        check_columns("p(s|q,d)", psq)?;
        if !psq.is_square() || psq.nrows() != p_s.len() || py.ncols() != psq.ncols() || py.nrows() != ny {
            return Err(Error::DimensionMismatch(format!("proxy tables for d = {d}")));
        }
        let sv = psq.clone().svd(false, false).singular_values;
        let (smax, smin) = (sv.max(), sv.min());
        if smin <= 0.0 || smax / smin > MAX_CONDITION {
            return Err(Error::SingularProxyMatrix(d));
        }
        let inv = psq.clone().try_inverse().ok_or(Error::SingularProxyMatrix(d))?;
        let w = inv * &ps;
        let mut col: Vec<f64> = (0..ny).map(|y| (0..py.ncols()).map(|q| py[(y, q)] * w[q]).sum()).collect();
        if col.iter().any(|v| *v < -1e-8 || *v > 1.0 + 1e-8) {
            clipped = true;
            for v in col.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            let t: f64 = col.iter().sum();
            if t > 0.0 {
                for v in col.iter_mut() {
                    *v /= t;
                }
            }
        }
        for (y, v) in col.into_iter().enumerate() {
            p_do[y][d] = v;
        }
    }
    Ok(ProxyResult { p_do, clipped })
}

/// Linear proxy IV: after cross-fitted partialling on `X`, regress `Ỹ` on
/// `(D̃, S̃)` with instruments `(D̃, Q̃)` and report the `D̃` coefficient.
#[allow(clippy::too_many_arguments)]
pub fn proxy_linear_iv(
    y: &[f64],
    d: &[f64],
    s: &[f64],
    q: &[f64],
    x: &DMatrix<f64>,
    learner: &dyn Learner,
    plan: &CrossFitPlan,
    opts: DmlOptions,
) -> Result<DmlResult> {
    let n = y.len();
    for (name, v) in [("d", d), ("s", s), ("q", q)] {
        check_len(name, v.len(), n)?;
    }
    let task = |name: &'static str, v: &[f64]| NuisanceTask {
        name,
        learner,
        features: x,
        target: v.to_vec(),
        mask: None,
        propensity: false,
    };
    let eta = cross_fit_nuisances(&[task("y", y), task("d", d), task("s", s), task("q", q)], plan, opts.seed, opts.clip)?;
    let res = |name: &str, v: &[f64]| -> Result<Vec<f64>> { Ok(v.iter().zip(eta.get(name)?).map(|(a, b)| a - b).collect()) };
    let (yt, dt, st, qt) = (res("y", y)?, res("d", d)?, res("s", s)?, res("q", q)?);

    // Strength of Q̃ for S̃ after removing D̃ from both.
    let dd: f64 = dt.iter().map(|v| v * v).sum();
    if dd == 0.0 {
        return Err(Error::WeakResidualVariation);
    }
    let proj = |v: &[f64]| {
        let c = v.iter().zip(&dt).map(|(a, b)| a * b).sum::<f64>() / dd;
        v.iter().zip(&dt).map(|(a, b)| a - c * b).collect::<Vec<f64>>()
    };
    let fs = first_stage_diag(&proj(&st), &proj(&qt))?;
    if !fs.strong {
        return Err(Error::WeakInstrument(fs.t_stat));
    }

    let xr = DMatrix::from_fn(n, 2, |i, j| if j == 0 { dt[i] } else { st[i] });
    let zr = DMatrix::from_fn(n, 2, |i, j| if j == 0 { dt[i] } else { qt[i] });
    let jm = zr.transpose() * &xr / n as f64;
    let jinv = jm.try_inverse().ok_or(Error::SingularJacobian)?;
    let zy = zr.transpose() * DVector::from_column_slice(&yt) / n as f64;
    let beta = &jinv * zy;
    let influence = (0..n)
        .map(|i| {
            let e = yt[i] - beta[0] * dt[i] - beta[1] * st[i];
            (jinv[(0, 0)] * zr[(i, 0)] + jinv[(0, 1)] * zr[(i, 1)]) * e
        })
        .collect();
    let mut out = DmlResult::from_influence("proxy_linear_iv", beta[0], influence, opts.alpha);
    out.nuisances = eta.diagnostics;
    Ok(out)
}

/// Regression of a weighting transform on covariates.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub r2: f64,
    pub wald: f64,
    pub df: usize,
    pub p_value: f64,
    /// Robust t statistics of the retained covariates.
    pub t_stats: Vec<f64>,
    /// Retained (non-constant) covariate indices.
    pub columns: Vec<usize>,
    /// No non-constant covariates: the test has nothing to check.
    pub vacuous: bool,
}

/// OLS of `H` on `(1, W)` with HC0 variance and a joint Wald test that all
/// slopes vanish.
pub fn balance_check(h: &[f64], w: &DMatrix<f64>) -> Result<BalanceReport> {
    let n = h.len();
    check_len("W rows", w.nrows(), n)?;
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("transform values must be finite".into()));
    }
    let columns: Vec<usize> = (0..w.ncols())
        .filter(|&j| {
            let c = w.column(j);
            let m = c.mean();
            c.iter().any(|v| (v - m).abs() > 1e-12 * m.abs().max(1e-300))
        })
        .collect();
    if columns.is_empty() {
        return Ok(BalanceReport { r2: 0.0, wald: 0.0, df: 0, p_value: 1.0, t_stats: Vec::new(), columns, vacuous: true });
    }
    let k = columns.len();
    let fit = ols_fit(&with_intercept(&w.select_columns(columns.iter())), h, None)?;
    let vc = robust_variance(&fit, HcKind::Hc0)?;
    let b = DVector::from_fn(k, |j, _| fit.coefficients[j + 1]);
    let v = vc.matrix.view((1, 1), (k, k)).into_owned();
    let wald = match v.clone().cholesky() {
        Some(c) => b.dot(&c.solve(&b)),
        None if b.amax() > 0.0 => f64::INFINITY,
        None => 0.0,
    };
    let hbar = h.iter().sum::<f64>() / n as f64;
    let tss: f64 = h.iter().map(|v| (v - hbar).powi(2)).sum();
    let rss: f64 = fit.residuals.iter().map(|e| e * e).sum();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
    let t_stats = (0..k)
        .map(|j| {
            let se = vc.se[j + 1];
            if se > 0.0 {
                b[j] / se
            } else if b[j] == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(b[j])
            }
        })
        .collect();
    let p_value = if wald.is_finite() { chisq_sf(wald, k as f64) } else { 0.0 };
    Ok(BalanceReport { r2, wald, df: k, p_value, t_stats, columns, vacuous: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bound_formula_values() {
        assert_eq!(ovb_bound(1.0, 0.3, 0.0, 2.0).unwrap().phi, 0.0);
        assert_abs_diff_eq!(ovb_bound(0.0, 0.25, 0.2, 1.0).unwrap().phi, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(ovb_bound(0.0, 0.5, 0.5, 2.0).unwrap().phi, 1.0, epsilon = 1e-12);
        let a = ovb_bound(0.0, 0.1, 0.3, 1.0).unwrap().phi;
        let b = ovb_bound(0.0, 0.1, 0.3, 2.0).unwrap().phi;
        assert_abs_diff_eq!(b, a * 2f64.sqrt(), epsilon = 1e-12);
        assert!(matches!(ovb_bound(0.0, 1.0, 0.1, 1.0), Err(Error::BadR2(_))));
        assert!(matches!(ovb_bound(0.0, 0.1, -0.1, 1.0), Err(Error::BadR2(_))));
    }

    #[test]
    fn contour_shape() {
        let c = contour_grid(1.0, 0.5, CONTOUR_POINTS).unwrap();
        assert_eq!(c.len(), 2500);
        assert_eq!(c[0], (0.0, 0.0, 0.0));
        assert_abs_diff_eq!(c.last().unwrap().0, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn identity_proxies_give_backdoor() {
        let py = vec![
            DMatrix::from_row_slice(2, 2, &[0.8, 0.3, 0.2, 0.7]),
            DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.4, 0.9]),
        ];
        let ps = vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)];
        let pa = [0.4, 0.6];
        let r = proxy_discrete(&py, &ps, &pa).unwrap();
        assert_abs_diff_eq!(r.p_do[0][0], 0.8 * 0.4 + 0.3 * 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_do[1][1], 0.4 * 0.4 + 0.9 * 0.6, epsilon = 1e-12);
        assert!(!r.clipped);
        let sing = vec![DMatrix::from_element(2, 2, 0.5), DMatrix::identity(2, 2)];
        assert!(matches!(proxy_discrete(&py, &sing, &pa), Err(Error::SingularProxyMatrix(0))));
        assert!(matches!(proxy_discrete(&py, &ps, &[0.5, 0.6]), Err(Error::NotADistribution(_))));
    }

    #[test]
    fn balance_edge_cases() {
        let h = [1.0, -1.0, 2.0, -2.0];
        let r = balance_check(&h, &DMatrix::from_element(4, 1, 3.0)).unwrap();
        assert!(r.vacuous && r.p_value == 1.0);
        let d = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let h: Vec<f64> = d.iter().map(|v| v / 0.5 - (1.0 - v) / 0.5).collect();
        let r = balance_check(&h, &DMatrix::from_column_slice(6, 1, &d)).unwrap();
        assert!(r.p_value < 1e-6);
    }
}
