//! Inference that stays valid under weak identification.
//!
//! The score statistic `C(θ) = n·M̌(θ)'Ω̌(θ)⁻¹M̌(θ)` is inverted over a grid of
//! candidate values. The accepted set is reported as every maximal run of
//! accepted grid points, so disconnected and edge-touching regions survive.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dml::{cross_fit_nuisances, DmlOptions, Score};
use crate::error::{check_len, Error, Result};
use crate::learners::CrossFitPlan;
use crate::linalg::{column, ols_fit, robust_variance, with_intercept, HcKind};
use crate::stats::qchisq;

/// Default number of grid points.
pub const DEFAULT_GRID: usize = 401;

/// Threshold on `|t|` above which an instrument is considered strong.
pub const STRONG_T: f64 = 4.0;

/// `n` equispaced points on `[lo, hi]`.
pub fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// One maximal run of accepted grid points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionInterval {
    pub lo: f64,
    pub hi: f64,
    /// Run touches the lower grid edge, so the region may extend further.
    pub open_lo: bool,
    pub open_hi: bool,
}

/// Grid-inverted confidence region.
#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceRegion {
    pub grid: Vec<f64>,
    pub c_values: Vec<f64>,
    pub accepted: Vec<bool>,
    pub intervals: Vec<RegionInterval>,
    pub alpha: f64,
    pub df: usize,
    pub critical: f64,
    pub empty: bool,
    pub disconnected: bool,
    pub unbounded: bool,
    /// Grid points where Ω̌ needed diagonal jitter to factor.
    pub jittered: usize,
}

impl ConfidenceRegion {
    /// Whether `θ` lies in one of the accepted intervals.
    pub fn contains(&self, theta: f64) -> bool {
        self.intervals.iter().any(|iv| iv.lo <= theta && theta <= iv.hi)
    }

    /// `(θ, C(θ))` rows for plotting.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("theta,c_stat,accepted\n");
        for ((t, c), a) in self.grid.iter().zip(&self.c_values).zip(&self.accepted) {
            s.push_str(&format!("{t},{c},{}\n", *a as u8));
        }
        s
    }
}

/// `C` from per-observation moment vectors (`n` rows, `m` columns), plus
/// whether jitter was needed.
pub fn c_statistic_moments(psi: &DMatrix<f64>) -> Result<(f64, bool)> {
    let (n, m) = psi.shape();
    if n < 2 {
        return Err(Error::InvalidInput("need at least two observations".into()));
    }
    let mbar = DVector::from_fn(m, |j, _| psi.column(j).mean());
    let mut omega = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        for a in 0..m {
            let da = psi[(i, a)] - mbar[a];
            for b in 0..m {
                omega[(a, b)] += da * (psi[(i, b)] - mbar[b]);
            }
        }
    }
    omega /= n as f64;
    let scale = (0..m).map(|j| psi.column(j).iter().map(|v| v * v).sum::<f64>() / n as f64).fold(0.0, f64::max);
    if (0..m).any(|j| omega[(j, j)] <= 1e-14 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateVariance);
    }
    let (chol, jitter) = match omega.clone().cholesky() {
        Some(c) => (c, false),
        None => {
            let mut o = omega;
            for j in 0..m {
                o[(j, j)] += 1e-12;
            }
            (o.cholesky().ok_or(Error::DegenerateVariance)?, true)
        }
    };
    let sol = chol.solve(&mbar);
    Ok((n as f64 * mbar.dot(&sol), jitter))
}

fn pliv_moments(yt: &[f64], dt: &[f64], zt: &[f64], theta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(yt.len(), 1, |i, _| (yt[i] - theta * dt[i]) * zt[i])
}

/// Scalar score statistic for the residualized PLIV moment `(Y̌ − θĎ)Ž`.
pub fn c_statistic(yt: &[f64], dt: &[f64], zt: &[f64], theta: f64) -> Result<f64> {
    check_len("D residuals", dt.len(), yt.len())?;
    check_len("Z residuals", zt.len(), yt.len())?;
    Ok(c_statistic_moments(&pliv_moments(yt, dt, zt, theta))?.0)
}

/// Invert a moment-vector function over a sorted grid.
pub fn region_from_moments<F>(theta_grid: &[f64], alpha: f64, df: usize, moments: F) -> Result<ConfidenceRegion>
where
    F: Fn(f64) -> Result<DMatrix<f64>> + Sync,
{
    if theta_grid.is_empty() {
        return Err(Error::InvalidInput("grid is empty".into()));
    }
    if theta_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("grid must be sorted".into()));
    }
    let evals: Vec<(f64, bool)> = theta_grid
        .par_iter()
        .map(|t| moments(*t).and_then(|m| c_statistic_moments(&m)))
        .collect::<Result<_>>()?;
    let critical = qchisq(1.0 - alpha, df as f64);
    let c_values: Vec<f64> = evals.iter().map(|e| e.0).collect();
    let accepted: Vec<bool> = c_values.iter().map(|c| *c <= critical).collect();
    let last = theta_grid.len() - 1;
    let mut intervals = Vec::new();
    let mut start = None;
    for i in 0..=last {
        match (accepted[i], start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                intervals.push(RegionInterval { lo: theta_grid[s], hi: theta_grid[i - 1], open_lo: s == 0, open_hi: false });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        intervals.push(RegionInterval { lo: theta_grid[s], hi: theta_grid[last], open_lo: s == 0, open_hi: true });
    }
    Ok(ConfidenceRegion {
        grid: theta_grid.to_vec(),
        empty: intervals.is_empty(),
        disconnected: intervals.len() > 1,
        unbounded: intervals.iter().any(|iv| iv.open_lo || iv.open_hi),
        jittered: evals.iter().filter(|e| e.1).count(),
        c_values,
        accepted,
        intervals,
        alpha,
        df,
        critical,
    })
}

/// Robust region for the residualized PLIV model (one instrument, `m = 1`).
pub fn robust_region(yt: &[f64], dt: &[f64], zt: &[f64], theta_grid: &[f64], alpha: f64) -> Result<ConfidenceRegion> {
    check_len("D residuals", dt.len(), yt.len())?;
    check_len("Z residuals", zt.len(), yt.len())?;
    region_from_moments(theta_grid, alpha, 1, |t| Ok(pliv_moments(yt, dt, zt, t)))
}

/// First-stage strength of the residualized instrument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstStage {
    pub coefficient: f64,
    pub se: f64,
    pub t_stat: f64,
    pub strong: bool,
}

/// OLS of `Ď` on `(1, Ž)` with HC0 standard errors; strong when `|t| > 4`.
pub fn first_stage_diag(dt: &[f64], zt: &[f64]) -> Result<FirstStage> {
    check_len("Z residuals", zt.len(), dt.len())?;
    if dt.len() < 3 {
        return Err(Error::InvalidInput("first stage needs n >= 3".into()));
    }
    let fit = ols_fit(&with_intercept(&column(zt)), dt, None)?;
    let se = robust_variance(&fit, HcKind::Hc0)?.se[1];
    let coefficient = fit.coefficients[1];
    let t_stat = if se > 0.0 {
        coefficient / se
    } else if coefficient == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(coefficient)
    };
    Ok(FirstStage { coefficient, se, t_stat, strong: t_stat.abs() > STRONG_T })
}

/// Weak-identification-robust region for any scalar orthogonal score: the
/// nuisances are cross-fitted once and `ψ(W; θ, η̂)` is evaluated on the grid.
pub fn generic_weak_id(
    score: &dyn Score,
    plan: &CrossFitPlan,
    theta_grid: &[f64],
    opts: DmlOptions,
) -> Result<ConfidenceRegion> {
    let eta = cross_fit_nuisances(&score.tasks(), plan, opts.seed, opts.clip)?;
    region_from_moments(theta_grid, opts.alpha, 1, |t| {
        let psi = score.psi(&eta, t)?;
        Ok(DMatrix::from_vec(psi.len(), 1, psi))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_statistic() {
        let m = DMatrix::from_vec(4, 1, vec![1.0, -1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(c_statistic_moments(&m).unwrap().0, 4.0 / 3.0, epsilon = 1e-12);
        let m = DMatrix::from_vec(3, 1, vec![2.0, 2.0, 2.0]);
        assert!(matches!(c_statistic_moments(&m), Err(Error::DegenerateVariance)));
    }

    #[test]
    fn zero_moment_gives_zero() {
        let zt = [1.0, -1.0, 1.0, -1.0];
        let dt = [2.0, -1.0, 1.0, -2.0];
        let yt = [3.0, -2.0, 2.0, -3.0];
        assert_abs_diff_eq!(c_statistic(&yt, &dt, &zt, 10.0 / 6.0).unwrap(), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn interval_stitching() {
        let g = grid(-1.0, 1.0, 5);
        let r = region_from_moments(&g, 0.05, 1, |t| {
            // Accept near ±0.5, reject elsewhere.
            let c = if (t.abs() - 0.5).abs() < 1e-9 { 0.0 } else { 3.0 };
            Ok(DMatrix::from_vec(4, 1, vec![c + 1.0, c - 1.0, c + 1.0, c - 1.0]))
        })
        .unwrap();
        assert_eq!(r.intervals.len(), 2);
        assert!(r.disconnected && !r.unbounded);
        assert!(r.contains(0.5) && !r.contains(0.0));
    }

    #[test]
    fn first_stage_cases() {
        let z: Vec<f64> = (0..100).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
        let d: Vec<f64> = z.iter().enumerate().map(|(i, v)| 5.0 * v + 1e-3 * ((i % 7) as f64 - 3.0)).collect();
        assert!(first_stage_diag(&d, &z).unwrap().strong);
        let z = [1.0, -1.0, 1.0, -1.0];
        let d = [1.0, 1.0, -1.0, -1.0];
        let fs = first_stage_diag(&d, &z).unwrap();
        assert!(fs.t_stat.abs() < 1e-12);
        assert!(!fs.strong);
        assert!(matches!(first_stage_diag(&d, &[2.0; 4]), Err(Error::RankDeficient { .. })));
    }
}
