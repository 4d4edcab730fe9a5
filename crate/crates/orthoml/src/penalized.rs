//! Penalized least squares: Lasso with the plug-in penalty, Post-Lasso,
//! Ridge, Elastic Net and K-fold cross-validation.
//!
//! The intercept is never penalized; it is handled by demeaning. Coordinate
//! descent runs on columns standardized to `Eₙ[X_j²] = 1` and maps the
//! solution back to the original scale.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::learners::CrossFitPlan;
use crate::linalg::{ols_fit, select_columns, select_rows, with_intercept, OlsFit};
use crate::stats::qnorm;

/// Coordinate descent stops when the largest coefficient change falls below this.
pub const CD_TOL: f64 = 1e-7;
/// Sweep cap for coordinate descent.
pub const CD_MAX_SWEEPS: usize = 10_000;
/// Stationarity gap, per observation on standardized columns, required at exit.
pub const KKT_TOL: f64 = 1e-9;

/// Intercept plus slopes on the original scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                self.intercept
                    + self
                        .coefficients
                        .iter()
                        .enumerate()
                        .map(|(j, b)| if *b == 0.0 { 0.0 } else { b * x[(i, j)] })
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Output of [`lasso_fit`] and [`elastic_net_fit`].
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// L1 penalty level `λ`.
    pub lambda: f64,
    /// Ridge level (zero for a pure Lasso).
    pub ridge: f64,
    pub loadings: Vec<f64>,
    pub active: Vec<usize>,
    /// Noise level used by the plug-in rule, when the fit came from it.
    pub sigma: Option<f64>,
    pub sweeps: usize,
    /// Columns with no variation; never penalized, coefficient fixed at zero.
    pub constant_columns: Vec<usize>,
    /// Objective value after each sweep.
    pub objective_trace: Vec<f64>,
    /// Largest stationarity violation `|∂ objective|/n` on standardized columns.
    pub kkt_gap: f64,
}

impl LassoFit {
    pub fn model(&self) -> LinearModel {
        LinearModel { intercept: self.intercept, coefficients: self.coefficients.clone() }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.model().predict(x)
    }

    /// Recompute the KKT gap of this fit on `(x, y)`, measured as the largest
    /// violation of `|2Σᵢ rᵢ x_ji − 2λ₁b_j| ≤ λψ_j` (with equality and sign
    /// agreement on the active set), divided by `n·sd(x_j)`.
    pub fn kkt_check(&self, x: &DMatrix<f64>, y: &[f64]) -> f64 {
        let n = x.nrows();
        let pred = self.predict(x);
        let r: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let mut gap: f64 = 0.0;
        for j in 0..x.ncols() {
            let mean = x.column(j).mean();
            let sd = (x.column(j).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
            if sd == 0.0 {
                continue;
            }
            let g: f64 = 2.0 * (0..n).map(|i| r[i] * x[(i, j)]).sum::<f64>() - 2.0 * self.ridge * self.coefficients[j];
            let pen = self.lambda * self.loadings[j];
            let b = self.coefficients[j];
            let v = if b != 0.0 { (g - pen * b.signum()).abs() } else { (g.abs() - pen).max(0.0) };
            gap = gap.max(v / (n as f64 * sd));
        }
        gap
    }
}

struct Standardized {
    z: DMatrix<f64>,
    yc: Vec<f64>,
    means: Vec<f64>,
    ymean: f64,
    sd: Vec<f64>,
}

fn standardize(x: &DMatrix<f64>, y: &[f64]) -> Standardized {
    let (n, p) = x.shape();
    let ymean = y.iter().sum::<f64>() / n as f64;
    let yc = y.iter().map(|v| v - ymean).collect();
    let mut z = x.clone();
    let mut means = vec![0.0; p];
    let mut sd = vec![0.0; p];
    for j in 0..p {
        let m = x.column(j).mean();
        let s = (x.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        let scale_ref = x.column(j).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        means[j] = m;
        sd[j] = if s > 1e-12 * scale_ref.max(1e-300) { s } else { 0.0 };
        for i in 0..n {
            z[(i, j)] = if sd[j] > 0.0 { (x[(i, j)] - m) / sd[j] } else { 0.0 };
        }
    }
    Standardized { z, yc, means, ymean, sd }
}

/// Default Lasso loadings `ψ̂_j = sqrt(Eₙ[(X_j − X̄_j)²])`.
pub fn default_loadings(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    (0..x.ncols())
        .map(|j| {
            let m = x.column(j).mean();
            (x.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Shared coordinate-descent solver for
/// `Σ(y − a − x'b)² + λ Σ ψ_j|b_j| + λ₂ Σ b_j²`.
fn penalized_fit(x: &DMatrix<f64>, y: &[f64], lambda: f64, loadings: &[f64], ridge: f64) -> Result<LassoFit> {
    let (n, p) = x.shape();
    if n == 0 {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    check_len("y", y.len(), n)?;
    check_len("loadings", loadings.len(), p)?;
    for v in [lambda, ridge] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::NonFinitePenalty(v));
        }
    }
    if loadings.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput("loadings must be finite and nonnegative".into()));
    }
    let st = standardize(x, y);
    let constant_columns: Vec<usize> = (0..p).filter(|&j| st.sd[j] == 0.0).collect();
    let live: Vec<usize> = (0..p).filter(|&j| st.sd[j] > 0.0).collect();
    let nf = n as f64;

    let finish = |bt: &[f64], sweeps: usize, trace: Vec<f64>, gap: f64| {
        let mut coefficients = vec![0.0; p];
        for j in 0..p {
            if st.sd[j] > 0.0 {
                coefficients[j] = bt[j] / st.sd[j];
            }
        }
        let intercept = st.ymean - (0..p).map(|j| coefficients[j] * st.means[j]).sum::<f64>();
        let active = (0..p).filter(|&j| coefficients[j] != 0.0).collect();
        LassoFit {
            intercept,
            coefficients,
            lambda,
            ridge,
            loadings: loadings.to_vec(),
            active,
            sigma: None,
            sweeps,
            constant_columns: constant_columns.clone(),
            objective_trace: trace,
            kkt_gap: gap,
        }
    };

    if live.is_empty() {
        return Ok(finish(&vec![0.0; p], 0, vec![st.yc.iter().map(|v| v * v).sum()], 0.0));
    }

    // The unpenalized problem is solved directly when it is well posed.
    if lambda == 0.0 && ridge == 0.0 {
        let zl = select_columns(&st.z, &live);
        if let Ok(fit) = ols_fit(&zl, &st.yc, None) {
            let mut bt = vec![0.0; p];
            for (k, &j) in live.iter().enumerate() {
                bt[j] = fit.coefficients[k];
            }
            let rss: f64 = fit.residuals.iter().map(|e| e * e).sum();
            let gap = fit.normal_equation_gap() * 2.0;
            return Ok(finish(&bt, 0, vec![rss], gap));
        }
    }

    let l1: Vec<f64> = (0..p)
        .map(|j| if st.sd[j] > 0.0 { lambda * loadings[j] / st.sd[j] } else { 0.0 })
        .collect();
    let l2: Vec<f64> = (0..p)
        .map(|j| if st.sd[j] > 0.0 { ridge / (st.sd[j] * st.sd[j]) } else { 0.0 })
        .collect();
    let zt = st.z.transpose();
    let gram = &zt * &st.z;
    let yv = DVector::from_column_slice(&st.yc);
    let c: Vec<f64> = (&zt * &yv).iter().cloned().collect();
    let yy: f64 = st.yc.iter().map(|v| v * v).sum();
    let mut b = vec![0.0; p];
    let mut g = c.clone();

    let objective = |b: &[f64], g: &[f64]| {
        let mut rss = yy;
        let mut pen = 0.0;
        for j in 0..p {
            if b[j] != 0.0 {
                rss -= b[j] * (c[j] + g[j]);
                pen += l1[j] * b[j].abs() + l2[j] * b[j] * b[j];
            }
        }
        rss.max(0.0) + pen
    };
    let kkt = |b: &[f64], g: &[f64]| {
        let mut gap: f64 = 0.0;
        for &j in &live {
            let grad = 2.0 * g[j] - 2.0 * l2[j] * b[j];
            let v = if b[j] != 0.0 { (grad - l1[j] * b[j].signum()).abs() } else { (grad.abs() - l1[j]).max(0.0) };
            gap = gap.max(v / nf);
        }
        gap
    };

    let mut trace = vec![objective(&b, &g)];
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut max_delta: f64 = 0.0;
        for &j in &live {
            let rho = g[j] + nf * b[j];
            let thr = 0.5 * l1[j];
            let new = if rho > thr {
                (rho - thr) / (nf + l2[j])
            } else if rho < -thr {
                (rho + thr) / (nf + l2[j])
            } else {
                0.0
            };
            let delta = new - b[j];
            if delta != 0.0 {
                b[j] = new;
                let col = gram.column(j);
                for k in 0..p {
                    g[k] -= col[k] * delta;
                }
                max_delta = max_delta.max(delta.abs());
            }
        }
        let obj = objective(&b, &g);
        let prev = *trace.last().expect("trace seeded");
        debug_assert!(
            obj <= prev + 1e-9 * prev.abs().max(1.0),
            "objective increased from {prev} to {obj}"
        );
        trace.push(obj);
        if max_delta < CD_TOL {
            // Refresh the gradient to shed accumulated rounding, then check KKT.
            let bv = DVector::from_column_slice(&b);
            let gb = &gram * bv;
            for k in 0..p {
                g[k] = c[k] - gb[k];
            }
            let gap = kkt(&b, &g);
            if gap < KKT_TOL {
                return Ok(finish(&b, sweeps, trace, gap));
            }
        }
        if sweeps >= CD_MAX_SWEEPS {
            return Err(Error::NoConvergence(sweeps));
        }
    }
}

/// Lasso: minimizes `Σ(yᵢ − a − b'xᵢ)² + λ Σ_j ψ_j|b_j|`.
///
/// `loadings` defaults to [`default_loadings`].
pub fn lasso_fit(x: &DMatrix<f64>, y: &[f64], lambda: f64, loadings: Option<&[f64]>) -> Result<LassoFit> {
    let owned;
    let psi = match loadings {
        Some(l) => l,
        None => {
            owned = default_loadings(x);
            &owned
        }
    };
    penalized_fit(x, y, lambda, psi, 0.0)
}

/// Elastic net: minimizes `Σ(yᵢ − a − b'xᵢ)² + λ₁Σb_j² + λ₂Σ|b_j|`.
pub fn elastic_net_fit(x: &DMatrix<f64>, y: &[f64], ridge: f64, lasso: f64) -> Result<LassoFit> {
    penalized_fit(x, y, lasso, &vec![1.0; x.ncols()], ridge)
}

/// Ridge: minimizes `Σ(yᵢ − a − b'xᵢ)² + λΣb_j²` in closed form.
pub fn ridge_fit(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<LinearModel> {
    let (n, p) = x.shape();
    check_len("y", y.len(), n)?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::NonFinitePenalty(lambda));
    }
    let st = standardize(x, y);
    let mut xc = x.clone();
    for j in 0..p {
        for i in 0..n {
            xc[(i, j)] -= st.means[j];
        }
    }
    let beta: Vec<f64> = if lambda == 0.0 {
        ols_fit(&xc, &st.yc, None)?.coefficients
    } else {
        let a = xc.transpose() * &xc + DMatrix::identity(p, p) * lambda;
        let rhs = xc.transpose() * DVector::from_column_slice(&st.yc);
        a.cholesky()
            .ok_or(Error::RankDeficient { rank: 0, cols: p })?
            .solve(&rhs)
            .iter()
            .cloned()
            .collect()
    };
    let intercept = st.ymean - (0..p).map(|j| beta[j] * st.means[j]).sum::<f64>();
    Ok(LinearModel { intercept, coefficients: beta })
}

/// Result of [`plugin_lambda`].
#[derive(Debug, Clone, Serialize)]
pub struct PluginLambda {
    pub lambda: f64,
    pub sigma: f64,
    /// `z_{1−a/(2p)}`.
    pub z: f64,
    pub loadings: Vec<f64>,
}

/// Options for the plug-in penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PluginOptions {
    pub c: f64,
    pub a: f64,
    /// Number of σ refits.
    pub iterations: usize,
    /// Use `ψ̂_j = sqrt(Eₙ[ε̂²X_j²])` with `σ̂ = 1`.
    pub heteroskedastic: bool,
}

impl Default for PluginOptions {
    fn default() -> Self {
        PluginOptions { c: 1.1, a: 0.05, iterations: 1, heteroskedastic: false }
    }
}

/// `λ = 2cσ̂√n z_{1−a/(2p)}`.
pub fn plugin_formula(c: f64, a: f64, sigma: f64, n: usize, p: usize) -> f64 {
    2.0 * c * sigma * (n as f64).sqrt() * qnorm(1.0 - a / (2.0 * p as f64))
}

/// Plug-in penalty with iterated noise level.
///
/// σ̂ starts at the residual standard deviation of the intercept-only fit and
/// is refreshed from the Lasso residuals `iterations` times.
pub fn plugin_lambda(x: &DMatrix<f64>, y: &[f64], opts: PluginOptions) -> Result<PluginLambda> {
    let (n, p) = x.shape();
    if n < 2 || p == 0 {
        return Err(Error::InvalidInput("plug-in penalty needs n ≥ 2 and p ≥ 1".into()));
    }
    check_len("y", y.len(), n)?;
    let z = qnorm(1.0 - opts.a / (2.0 * p as f64));
    let ymean = y.iter().sum::<f64>() / n as f64;
    let mut resid: Vec<f64> = y.iter().map(|v| v - ymean).collect();
    let xc: DMatrix<f64> = {
        let mut m = x.clone();
        for j in 0..p {
            let mu = x.column(j).mean();
            for i in 0..n {
                m[(i, j)] -= mu;
            }
        }
        m
    };
    let state = |resid: &[f64]| -> (f64, Vec<f64>) {
        if opts.heteroskedastic {
            let psi = (0..p)
                .map(|j| ((0..n).map(|i| resid[i] * resid[i] * xc[(i, j)] * xc[(i, j)]).sum::<f64>() / n as f64).sqrt())
                .collect();
            (1.0, psi)
        } else {
            let s = (resid.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
            (s, default_loadings(x))
        }
    };
    let (mut sigma, mut psi) = state(&resid);
    for _ in 0..opts.iterations {
        let lambda = 2.0 * opts.c * sigma * (n as f64).sqrt() * z;
        let fit = lasso_fit(x, y, lambda, Some(&psi))?;
        let pred = fit.predict(x);
        resid = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let next = state(&resid);
        sigma = next.0;
        psi = next.1;
    }
    Ok(PluginLambda { lambda: 2.0 * opts.c * sigma * (n as f64).sqrt() * z, sigma, z, loadings: psi })
}

/// Lasso at the plug-in penalty.
pub fn lasso_plugin(x: &DMatrix<f64>, y: &[f64], opts: PluginOptions) -> Result<LassoFit> {
    let pl = plugin_lambda(x, y, opts)?;
    let mut fit = lasso_fit(x, y, pl.lambda, Some(&pl.loadings))?;
    fit.sigma = Some(pl.sigma);
    Ok(fit)
}

/// Post-Lasso refit: OLS on the intercept and the active columns.
#[derive(Debug, Clone)]
pub struct PostLasso {
    pub intercept: f64,
    /// Full-length slope vector, zero outside the active set.
    pub coefficients: Vec<f64>,
    pub active: Vec<usize>,
    pub ols: OlsFit,
}

impl PostLasso {
    pub fn model(&self) -> LinearModel {
        LinearModel { intercept: self.intercept, coefficients: self.coefficients.clone() }
    }
}

pub fn post_lasso(x: &DMatrix<f64>, y: &[f64], fit: &LassoFit) -> Result<PostLasso> {
    let design = with_intercept(&select_columns(x, &fit.active));
    let ols = ols_fit(&design, y, None)?;
    let mut coefficients = vec![0.0; x.ncols()];
    for (k, &j) in fit.active.iter().enumerate() {
        coefficients[j] = ols.coefficients[k + 1];
    }
    Ok(PostLasso { intercept: ols.coefficients[0], coefficients, active: fit.active.clone(), ols })
}

/// Penalty specification for cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Penalty {
    Lasso(f64),
    Ridge(f64),
    ElasticNet { ridge: f64, lasso: f64 },
}

impl Penalty {
    pub fn fit(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<LinearModel> {
        match *self {
            Penalty::Lasso(l) => Ok(lasso_fit(x, y, l, None)?.model()),
            Penalty::Ridge(l) => ridge_fit(x, y, l),
            Penalty::ElasticNet { ridge, lasso } => Ok(elastic_net_fit(x, y, ridge, lasso)?.model()),
        }
    }
}

/// Cross-validation summary.
#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub grid: Vec<Penalty>,
    /// `fold_mse[g][k]`: out-of-fold MSE of grid point `g` on fold `k`.
    pub fold_mse: Vec<Vec<f64>>,
    pub cv_mse: Vec<f64>,
    pub selected_index: usize,
    pub selected: Penalty,
    /// Refit on the full sample at the selected penalty.
    pub model: LinearModel,
}

/// K-fold cross-validation over `grid`; ties go to the smallest index.
pub fn cv_fit(x: &DMatrix<f64>, y: &[f64], grid: &[Penalty], plan: &CrossFitPlan) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty penalty grid".into()));
    }
    if plan.k < 2 {
        return Err(Error::BadFoldCount { n: plan.n, k: plan.k });
    }
    check_len("y", y.len(), plan.n)?;
    for k in 0..plan.k {
        let size = plan.test_indices(k).len();
        if size < 2 {
            return Err(Error::FoldTooSmall { fold: k, size });
        }
    }
    let per_fold: Vec<Vec<f64>> = (0..plan.k)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let tr = plan.train_indices(k);
            let te = plan.test_indices(k);
            let xtr = select_rows(x, &tr);
            let ytr: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
            let xte = select_rows(x, &te);
            grid.iter()
                .map(|pen| {
                    let m = pen.fit(&xtr, &ytr)?;
                    let pred = m.predict(&xte);
                    Ok(te.iter().zip(&pred).map(|(&i, p)| (y[i] - p).powi(2)).sum::<f64>() / te.len() as f64)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let fold_mse: Vec<Vec<f64>> = (0..grid.len()).map(|g| (0..plan.k).map(|k| per_fold[k][g]).collect()).collect();
    let cv_mse: Vec<f64> = fold_mse.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let mut selected_index = 0;
    for g in 1..grid.len() {
        if cv_mse[g] < cv_mse[selected_index] {
            selected_index = g;
        }
    }
    let selected = grid[selected_index];
    let model = selected.fit(x, y)?;
    Ok(CvReport { grid: grid.to_vec(), fold_mse, cv_mse, selected_index, selected, model })
}

/// How the penalty of a Lasso stage is chosen.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LambdaRule {
    Plugin(PluginOptions),
    Fixed(f64),
    /// Cross-validated over `grid` with `folds` folds on stream `seed`.
    Cv { grid: Vec<f64>, folds: usize, seed: u64 },
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::Plugin(PluginOptions::default())
    }
}

/// Lasso fit under a [`LambdaRule`].
pub fn lasso_with_rule(x: &DMatrix<f64>, y: &[f64], rule: &LambdaRule) -> Result<LassoFit> {
    match rule {
        LambdaRule::Plugin(o) => {
            if x.ncols() == 0 {
                return lasso_fit(x, y, 0.0, None);
            }
            lasso_plugin(x, y, *o)
        }
        LambdaRule::Fixed(l) => lasso_fit(x, y, *l, None),
        LambdaRule::Cv { grid, folds, seed } => {
            let plan = CrossFitPlan::new(x.nrows(), *folds, *seed)?;
            let pens: Vec<Penalty> = grid.iter().map(|l| Penalty::Lasso(*l)).collect();
            let rep = cv_fit(x, y, &pens, &plan)?;
            let l = match rep.selected {
                Penalty::Lasso(l) => l,
                _ => unreachable!("lasso grid"),
            };
            lasso_fit(x, y, l, None)
        }
    }
}
