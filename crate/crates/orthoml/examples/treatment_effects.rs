//! Doubly robust ATE, ATET and group effects for a binary treatment.
//!
//! `cargo run --release --example treatment_effects`

use orthoml::dml::{dml_atet, dml_gate, dml_irm_ate, DmlOptions};
use orthoml::learners::{make_folds, LearnerSpec};
use orthoml::rng;
use orthoml::sim::generate;
use rand::Rng;

fn main() -> orthoml::Result<()> {
    let n = 2000;
    let s = generate("plm_smooth", n, 9)?;
    let mut r = rng::stream(9, "example", 0);
    // Binary treatment with propensity driven by x0 and an effect of 1 + x1.
    let d: Vec<f64> = (0..n).map(|i| (r.random::<f64>() < 1.0 / (1.0 + (-s.x[(i, 0)]).exp())) as u8 as f64).collect();
    let y: Vec<f64> = (0..n).map(|i| s.y[i] - s.theta * s.d[i] + d[i] * (1.0 + s.x[(i, 1)])).collect();
    let group: Vec<f64> = (0..n).map(|i| (s.x[(i, 1)] > 0.0) as u8 as f64).collect();
    let g: LearnerSpec = "forest:trees=100,min_leaf=5".parse()?;
    let m = LearnerSpec::Logistic { clip: 0.01 };
    let plan = make_folds(n, 5, 2)?;
    let opts = DmlOptions { seed: 2, ..DmlOptions::default() };
    let ate = dml_irm_ate(&y, &d, &s.x, &g, &m, &plan, opts)?;
    let atet = dml_atet(&y, &d, &s.x, &g, &m, &plan, opts)?;
    let gate = dml_gate(&y, &d, &s.x, &group, &g, &m, &plan, opts)?;
    for r in [&ate, &atet, &gate] {
        println!("{:<6} {:.3} (se {:.3}), {} trimmed", r.estimand, r.theta, r.se, r.trimmed);
    }
    Ok(())
}
