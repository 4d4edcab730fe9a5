//! Dense least squares with robust sandwich variances and the partialling-out
//! primitive used throughout the crate.
//!
//! Designs are `n × p` [`DMatrix`] values, vectors are plain slices. Sample
//! averages are written `Eₙ[·]`. Weighted fits minimize `Σ wᵢ(yᵢ − xᵢ'b)²`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_len, Error, Result};

/// Relative rank tolerance applied to the diagonal of the pivoted QR factor.
pub const RANK_TOL: f64 = 1e-10;

/// Result of an ordinary (or weighted) least squares fit.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Leverage `hᵢ` of each row in the (square-root weighted) design.
    pub leverage: Vec<f64>,
    /// Design second-moment matrix `Eₙ[w x x']`.
    pub gram: DMatrix<f64>,
    /// Numerical rank of the design.
    pub rank: usize,
    pub n: usize,
    pub p: usize,
    y: Vec<f64>,
    x: DMatrix<f64>,
    weights: Option<Vec<f64>>,
}

/// Sandwich variance flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HcKind {
    Hc0,
    Hc1,
    Hc3,
}

/// Robust variance of OLS coefficients.
#[derive(Debug, Clone)]
pub struct VarianceEstimate {
    pub kind: HcKind,
    /// `V̂/n`, the covariance matrix of the coefficient estimates.
    pub matrix: DMatrix<f64>,
    pub se: Vec<f64>,
}

/// Out-of-sample fit measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictiveMetrics {
    pub mse_test: f64,
    pub r2_test: f64,
    pub mse_adjusted: f64,
    pub r2_adjusted: f64,
}

fn validate_weights(w: &[f64], n: usize) -> Result<()> {
    check_len("weights", w.len(), n)?;
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
    }
    if w.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidInput("weights are all zero".into()));
    }
    Ok(())
}

fn sqrt_weighted(x: &DMatrix<f64>, y: &[f64], w: Option<&[f64]>) -> (DMatrix<f64>, DVector<f64>) {
    let mut xw = x.clone();
    let mut yw = DVector::from_column_slice(y);
    if let Some(w) = w {
        for (i, wi) in w.iter().enumerate() {
            let s = wi.sqrt();
            xw.row_mut(i).scale_mut(s);
            yw[i] *= s;
        }
    }
    (xw, yw)
}

/// Numerical rank from column-pivoted QR with tolerance `RANK_TOL × max |Rᵢᵢ|`.
pub fn numerical_rank(x: &DMatrix<f64>) -> usize {
    if x.ncols() == 0 || x.nrows() == 0 {
        return 0;
    }
    let r = x.clone().col_piv_qr().r();
    let d: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    d.iter().filter(|v| **v > RANK_TOL * max).count()
}

/// Least squares of `y` on the columns of `x`.
///
/// Fails with [`Error::RankDeficient`] when the design does not have full
/// column rank; see [`ols_fit_min_norm`] for the explicit fallback.
pub fn ols_fit(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<OlsFit> {
    fit_impl(x, y, weights, false)
}

/// Minimum-norm least squares; accepts rank-deficient designs.
pub fn ols_fit_min_norm(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<OlsFit> {
    fit_impl(x, y, weights, true)
}

fn fit_impl(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>, min_norm: bool) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if n == 0 {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    check_len("y", y.len(), n)?;
    if let Some(w) = weights {
        validate_weights(w, n)?;
    }
    let (xw, yw) = sqrt_weighted(x, y, weights);
    let rank = numerical_rank(&xw);
    let (beta, leverage) = if p == 0 {
        (DVector::zeros(0), vec![0.0; n])
    } else if rank == p {
        let qr = xw.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let qty = q.transpose() * &yw;
        let beta = r
            .solve_upper_triangular(&qty)
            .ok_or(Error::RankDeficient { rank, cols: p })?;
        let lev = (0..n).map(|i| q.row(i).norm_squared()).collect();
        (beta, lev)
    } else if min_norm {
        let svd = xw.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let eps = RANK_TOL * smax.max(f64::MIN_POSITIVE);
        let beta = svd
            .solve(&yw, eps)
            .map_err(|_| Error::RankDeficient { rank, cols: p })?;
        let u = svd.u.as_ref().expect("svd computed with u");
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&k| svd.singular_values[k] > eps)
            .collect();
        let lev = (0..n)
            .map(|i| keep.iter().map(|&k| u[(i, k)] * u[(i, k)]).sum())
            .collect();
        (beta, lev)
    } else {
        return Err(Error::RankDeficient { rank, cols: p });
    };
    let fitted_v = x * &beta;
    let fitted: Vec<f64> = fitted_v.iter().cloned().collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let gram = xw.transpose() * &xw / n as f64;
    Ok(OlsFit {
        coefficients: beta.iter().cloned().collect(),
        residuals,
        fitted,
        leverage,
        gram,
        rank,
        n,
        p,
        y: y.to_vec(),
        x: x.clone(),
        weights: weights.map(|w| w.to_vec()),
    })
}

impl OlsFit {
    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    fn wmean<F: Fn(usize) -> f64>(&self, f: F) -> f64 {
        let mut s = 0.0;
        let mut ws = 0.0;
        for i in 0..self.n {
            let w = self.weight(i);
            s += w * f(i);
            ws += w;
        }
        s / ws
    }

    /// In-sample mean squared error `Eₙ[ε̂²]` (weighted when weights were given).
    pub fn mse_sample(&self) -> f64 {
        self.wmean(|i| self.residuals[i] * self.residuals[i])
    }

    /// `1 − Eₙ[ε̂²]/Eₙ[y²]`.
    pub fn r2_sample(&self) -> f64 {
        1.0 - self.mse_sample() / self.wmean(|i| self.y[i] * self.y[i])
    }

    /// `n/(n−p)·Eₙ[ε̂²]`.
    pub fn mse_adjusted(&self) -> Result<f64> {
        if self.p >= self.n {
            return Err(Error::DegreesOfFreedom { n: self.n, p: self.p });
        }
        Ok(self.n as f64 / (self.n - self.p) as f64 * self.mse_sample())
    }

    pub fn r2_adjusted(&self) -> Result<f64> {
        Ok(1.0 - self.mse_adjusted()? / self.wmean(|i| self.y[i] * self.y[i]))
    }

    /// Largest absolute sample normal-equation residual `max_j |Eₙ[w X_j ε̂]|`.
    pub fn normal_equation_gap(&self) -> f64 {
        (0..self.p)
            .map(|j| {
                let s: f64 = (0..self.n)
                    .map(|i| self.weight(i) * self.x[(i, j)] * self.residuals[i])
                    .sum();
                (s / self.n as f64).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn outcome(&self) -> &[f64] {
        &self.y
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Influence values of coefficient `j`: `φᵢ = [G⁻¹ xᵢ]_j wᵢ ε̂ᵢ`, so that
    /// `Eₙ[φ²]/n` is the HC0 variance of `b̂_j`.
    pub fn influence(&self, j: usize) -> Result<Vec<f64>> {
        let ginv = self
            .gram
            .clone()
            .cholesky()
            .ok_or(Error::RankDeficient { rank: self.rank, cols: self.p })?
            .inverse();
        Ok((0..self.n)
            .map(|i| {
                let a: f64 = (0..self.p).map(|k| ginv[(j, k)] * self.x[(i, k)]).sum();
                a * self.weight(i) * self.residuals[i]
            })
            .collect())
    }

    /// Predictions `x b̂` for new rows.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let b = DVector::from_column_slice(&self.coefficients);
        (x * b).iter().cloned().collect()
    }
}

/// Eicker-Huber-White sandwich variance of the coefficients.
///
/// `V̂ = G⁻¹ Eₙ[xx' ωᵢ ε̂ᵢ²] G⁻¹` with `G = Eₙ[xx']`, weights folded into the
/// rows; the returned matrix is `V̂/n`.
pub fn robust_variance(fit: &OlsFit, kind: HcKind) -> Result<VarianceEstimate> {
    let (n, p) = (fit.n, fit.p);
    if fit.rank < p {
        return Err(Error::RankDeficient { rank: fit.rank, cols: p });
    }
    let ginv = fit
        .gram
        .clone()
        .cholesky()
        .ok_or(Error::RankDeficient { rank: fit.rank, cols: p })?
        .inverse();
    let dof = match kind {
        HcKind::Hc1 => {
            if p >= n {
                return Err(Error::DegreesOfFreedom { n, p });
            }
            n as f64 / (n - p) as f64
        }
        _ => 1.0,
    };
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let w = fit.weight(i);
        let e = fit.residuals[i];
        let omega = match kind {
            HcKind::Hc0 => 1.0,
            HcKind::Hc1 => dof,
            HcKind::Hc3 => {
                let h = fit.leverage[i];
                if h >= 1.0 - 1e-12 {
                    return Err(Error::LeverageOne(i));
                }
                1.0 / ((1.0 - h) * (1.0 - h))
            }
        };
        let s = w * w * e * e * omega;
        if s == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = fit.x[(i, a)];
            if xa == 0.0 {
                continue;
            }
            for b in 0..p {
                meat[(a, b)] += s * xa * fit.x[(i, b)];
            }
        }
    }
    meat /= n as f64;
    let v = &ginv * meat * &ginv;
    let mut matrix = v / n as f64;
    matrix = (&matrix + matrix.transpose()) * 0.5;
    let se = (0..p).map(|j| matrix[(j, j)].max(0.0).sqrt()).collect();
    Ok(VarianceEstimate { kind, matrix, se })
}

/// Residuals of each column of `v` after weighted least squares on `w`.
pub fn partial_out(v: &DMatrix<f64>, w: &DMatrix<f64>, weights: Option<&[f64]>) -> Result<DMatrix<f64>> {
    let n = v.nrows();
    if w.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "controls have {} rows, expected {n}",
            w.nrows()
        )));
    }
    let mut out = DMatrix::zeros(n, v.ncols());
    for j in 0..v.ncols() {
        let col: Vec<f64> = v.column(j).iter().cloned().collect();
        let fit = ols_fit(w, &col, weights)?;
        out.set_column(j, &DVector::from_vec(fit.residuals));
    }
    Ok(out)
}

/// Vector form of [`partial_out`].
pub fn partial_out_vec(v: &[f64], w: &DMatrix<f64>, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if w.ncols() == 0 {
        return Ok(v.to_vec());
    }
    Ok(ols_fit(w, v, weights)?.residuals)
}

/// Test-sample MSE and R² with the `n/(n−p)` adjusted versions.
///
/// `center` optionally subtracts a training-sample mean from the outcome
/// before computing the R² denominator `Eₙ[y²]`.
pub fn predictive_metrics(
    y_true: &[f64],
    y_pred: &[f64],
    p: usize,
    center: Option<f64>,
) -> Result<PredictiveMetrics> {
    let n = y_true.len();
    check_len("y_pred", y_pred.len(), n)?;
    if n == 0 {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    if p >= n {
        return Err(Error::DegreesOfFreedom { n, p });
    }
    let c = center.unwrap_or(0.0);
    let mse = y_true.iter().zip(y_pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
    let ey2 = y_true.iter().map(|a| (a - c) * (a - c)).sum::<f64>() / n as f64;
    let mse_adj = n as f64 / (n - p) as f64 * mse;
    Ok(PredictiveMetrics {
        mse_test: mse,
        r2_test: 1.0 - mse / ey2,
        mse_adjusted: mse_adj,
        r2_adjusted: 1.0 - mse_adj / ey2,
    })
}

/// `[1, x]` design.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = DMatrix::from_element(n, x.ncols() + 1, 1.0);
    out.view_mut((0, 1), (n, x.ncols())).copy_from(x);
    out
}

/// Column-bind matrices with equal row counts.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let p: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, p);
    let mut off = 0;
    for b in blocks {
        out.view_mut((0, off), (n, b.ncols())).copy_from(*b);
        off += b.ncols();
    }
    out
}

/// Single column matrix.
pub fn column(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

/// Select columns by index.
pub fn select_columns(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    x.select_columns(idx.iter())
}

/// Select rows by index.
pub fn select_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    x.select_rows(idx.iter())
}
