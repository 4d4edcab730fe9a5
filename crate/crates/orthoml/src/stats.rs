//! Distribution quantiles, sample moments and Monte Carlo critical values
//! for simultaneous bands.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::rng;

/// Draw count for simulated band critical values.
pub const BAND_DRAWS: usize = 100_000;

/// Standard normal quantile.
pub fn qnorm(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("valid normal").inverse_cdf(p)
}

/// Standard normal CDF.
pub fn pnorm(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("valid normal").cdf(x)
}

/// Two-sided normal p-value of a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    2.0 * (1.0 - pnorm(z.abs()))
}

/// Chi-square quantile with `df` degrees of freedom.
pub fn qchisq(p: f64, df: f64) -> f64 {
    ChiSquared::new(df).expect("positive df").inverse_cdf(p)
}

/// Chi-square upper tail probability.
pub fn chisq_sf(x: f64, df: f64) -> f64 {
    1.0 - ChiSquared::new(df).expect("positive df").cdf(x)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Centered second moment `Eₙ[(v − Eₙv)²]`.
pub fn var_n(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// `Eₙ[ab] − Eₙ[a]Eₙ[b]`.
pub fn cov_n(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64
}

/// Median (average of the two middle values for even length).
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Empirical `p`-quantile, lower order statistic at `ceil(p·n)`.
pub fn empirical_quantile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = ((p * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[k - 1]
}

/// Correlation matrix `D^{-1/2} V D^{-1/2}`; zero-variance rows stay zero.
pub fn correlation(v: &DMatrix<f64>) -> DMatrix<f64> {
    let p = v.nrows();
    let d: Vec<f64> = (0..p).map(|i| v[(i, i)].max(0.0).sqrt()).collect();
    DMatrix::from_fn(p, p, |i, j| {
        if d[i] > 0.0 && d[j] > 0.0 {
            v[(i, j)] / (d[i] * d[j])
        } else {
            0.0
        }
    })
}

/// Critical value `c` such that `P(max_ℓ Z_ℓ ≤ c) = 1 − α` for
/// `Z ~ N(0, R)` (one-sided) or `P(max_ℓ |Z_ℓ| ≤ c) = 1 − α` (two-sided).
///
/// Rank-one correlation matrices and the scalar case return the exact normal
/// quantile; otherwise the quantile is simulated from `draws` Gaussian
/// vectors on the stream `(seed, "band", 0)`. The result is never below the
/// pointwise quantile, so bands contain pointwise intervals.
pub fn max_gaussian_quantile(corr: &DMatrix<f64>, alpha: f64, two_sided: bool, draws: usize, seed: u64) -> f64 {
    let pointwise = if two_sided { qnorm(1.0 - alpha / 2.0) } else { qnorm(1.0 - alpha) };
    let p = corr.nrows();
    if p <= 1 {
        return pointwise;
    }
    let eig = SymmetricEigen::new(corr.clone());
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..p).filter(|&k| eig.eigenvalues[k] > 1e-10 * lmax).collect();
    if keep.len() <= 1 {
        return pointwise;
    }
    let factor = DMatrix::from_fn(p, keep.len(), |i, c| {
        eig.eigenvectors[(i, keep[c])] * eig.eigenvalues[keep[c]].sqrt()
    });
    let mut r = rng::stream(seed, "band", 0);
    let mut stats = Vec::with_capacity(draws);
    let mut e = vec![0.0; keep.len()];
    for _ in 0..draws {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut r);
        }
        let mut m = f64::NEG_INFINITY;
        for i in 0..p {
            let mut z = 0.0;
            for (c, ec) in e.iter().enumerate() {
                z += factor[(i, c)] * ec;
            }
            let s = if two_sided { z.abs() } else { z };
            if s > m {
                m = s;
            }
        }
        stats.push(m);
    }
    empirical_quantile(&stats, 1.0 - alpha).max(pointwise)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_table_values() {
        assert!((qnorm(0.9975) - 2.8070).abs() < 1e-4);
        assert!((qnorm(0.975) - 1.959964).abs() < 1e-6);
        assert!((qchisq(0.95, 1.0) - 3.841459).abs() < 1e-5);
    }

    #[test]
    fn independent_pair_matches_product_rule() {
        let c = max_gaussian_quantile(&DMatrix::identity(2, 2), 0.05, true, BAND_DRAWS, 3);
        let exact = qnorm((1.0 + 0.95f64.sqrt()) / 2.0);
        assert!((exact - 2.2365).abs() < 1e-3);
        assert!((c - exact).abs() < 0.02, "{c} vs {exact}");
    }

    #[test]
    fn perfectly_correlated_pair_is_scalar() {
        let r = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(max_gaussian_quantile(&r, 0.05, true, 1000, 1), qnorm(0.975));
    }

    #[test]
    fn moments() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(var_n(&[1.0, 3.0]), 1.0);
        assert_eq!(cov_n(&[0.0, 1.0, 2.0, 3.0], &[0.0, 0.0, 1.0, 1.0]), 0.5);
    }
}
