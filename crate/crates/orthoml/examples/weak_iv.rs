//! Instrumental variables with a weak first stage: Wald interval against the
//! weak-ID robust confidence region.
//!
//! `cargo run --release --example weak_iv`

use orthoml::dml::{dml_pliv, pliv_residuals_fit, DmlOptions};
use orthoml::learners::{make_folds, LearnerSpec};
use orthoml::sim::generate;
use orthoml::weak_id::{first_stage_diag, grid, robust_region};

fn main() -> orthoml::Result<()> {
    let s = generate("weak_iv", 500, 4)?;
    let z = s.z.clone().expect("design has an instrument");
    let ols = LearnerSpec::Ols;
    let plan = make_folds(500, 5, 4)?;
    let opts = DmlOptions { seed: 4, ..DmlOptions::default() };
    let (yt, dt, zt) = pliv_residuals_fit(&s.y, &s.d, &z, &s.x, &ols, &ols, &ols, &plan, opts)?;
    let fs = first_stage_diag(&dt, &zt)?;
    println!("first stage t = {:.2} ({})", fs.t_stat, if fs.strong { "strong" } else { "weak" });
    match dml_pliv(&s.y, &s.d, &z, &s.x, &ols, &ols, &ols, &plan, opts) {
        Ok(w) => println!("Wald {:.3}, ci [{:.3}, {:.3}]", w.theta, w.ci.0, w.ci.1),
        Err(e) => println!("Wald unavailable: {e}"),
    }
    let region = robust_region(&yt, &dt, &zt, &grid(-20.0, 20.0, 801), 0.05)?;
    println!("robust region (truth {}): {:?}; unbounded: {}", s.theta, region.intervals, region.unbounded);
    Ok(())
}
