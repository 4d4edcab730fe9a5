//! Panel difference in differences and a placebo check on two pre-periods.
//!
//! `cargo run --release --example did_placebo`

use orthoml::dml::{dml_did_panel, DmlOptions};
use orthoml::learners::{make_folds, LearnerSpec};
use orthoml::sim::generate;

fn main() -> orthoml::Result<()> {
    let plan = make_folds(2000, 5, 1)?;
    let opts = DmlOptions { seed: 1, ..DmlOptions::default() };
    let (g, m) = (LearnerSpec::Ols, LearnerSpec::Logistic { clip: 0.01 });
    for dgp in ["did_panel", "did_pretrend"] {
        let s = generate(dgp, 2000, 8)?;
        let atet = dml_did_panel(&s.pre[1], &s.y, &s.d, &s.x, &g, &m, &plan, opts)?;
        let placebo = dml_did_panel(&s.pre[0], &s.pre[1], &s.d, &s.x, &g, &m, &plan, opts)?;
        println!(
            "{dgp:<13} ATET {:.3} [{:.3}, {:.3}]  placebo {:.3} [{:.3}, {:.3}]{}",
            atet.theta,
            atet.ci.0,
            atet.ci.1,
            placebo.theta,
            placebo.ci.0,
            placebo.ci.1,
            if placebo.covers(0.0) { "" } else { "  <- pre-trends differ" }
        );
    }
    Ok(())
}
