//! Omitted-variable bounds for a partially linear model with a latent
//! confounder, plus the contour of bounds over confounding strength.
//!
//! `cargo run --release --example sensitivity`

use orthoml::dml::DmlOptions;
use orthoml::learners::{make_folds, LearnerSpec};
use orthoml::sensitivity::ovb_from_data;
use orthoml::sim::generate;

fn main() -> orthoml::Result<()> {
    let s = generate("example_12_2_1", 2000, 6)?;
    let ols = LearnerSpec::Ols;
    let plan = make_folds(2000, 5, 6)?;
    let b = ovb_from_data(&s.y, &s.d, &s.x, &ols, &ols, &plan, DmlOptions::default(), 1.0 / 3.0, 0.5, 0.6)?;
    let est = b.estimate.as_ref().expect("estimated from data");
    println!("short estimate {:.3} (true effect {})", est.theta, s.theta);
    println!("bias bound {:.3}: [{:.3}, {:.3}]", b.phi, b.interval.0, b.interval.1);
    if let Some((lo, hi)) = b.ci_interval {
        println!("with sampling error: [{lo:.3}, {hi:.3}]");
    }
    for line in b.contour_csv().lines().take(6) {
        println!("{line}");
    }
    Ok(())
}
