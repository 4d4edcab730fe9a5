//! OLS with heteroskedasticity-robust standard errors.
//!
//! `cargo run --example robust_ols`

use nalgebra::DMatrix;
use orthoml::linalg::{ols_fit, robust_variance, with_intercept, HcKind};
use orthoml::rng;
use rand::Rng;

fn main() -> orthoml::Result<()> {
    let n = 500;
    let mut r = rng::stream(1, "example", 0);
    let x = DMatrix::from_fn(n, 2, |_, _| r.random::<f64>() * 4.0 - 2.0);
    // Noise grows with |x1|, so classical and robust errors disagree.
    let y: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * x[(i, 0)] - x[(i, 1)] + (0.2 + x[(i, 0)].abs()) * (r.random::<f64>() - 0.5)).collect();
    let fit = ols_fit(&with_intercept(&x), &y, None)?;
    for kind in [HcKind::Hc0, HcKind::Hc1, HcKind::Hc3] {
        let v = robust_variance(&fit, kind)?;
        println!("{kind:?}: coefficients {:.3?} se {:.4?}", fit.coefficients, v.se);
    }
    Ok(())
}
