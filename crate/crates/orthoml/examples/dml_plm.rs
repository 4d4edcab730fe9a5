//! Cross-fitted partially linear model with random-forest nuisances, next to
//! the same estimate without cross-fitting.
//!
//! `cargo run --release --example dml_plm`

use orthoml::dml::{dml_plm, DmlOptions};
use orthoml::learners::{make_folds, CrossFitPlan, LearnerSpec};
use orthoml::sim::generate;

fn main() -> orthoml::Result<()> {
    let s = generate("plm_smooth", 1000, 5)?;
    let forest: LearnerSpec = "forest:trees=100,min_leaf=5".parse()?;
    let opts = DmlOptions { seed: 5, ..DmlOptions::default() };
    let cf = dml_plm(&s.y, &s.d, &s.x, &forest, &forest, &make_folds(1000, 5, 5)?, opts)?;
    let overfit: LearnerSpec = "forest:trees=100,min_leaf=1".parse()?;
    let nocf = dml_plm(&s.y, &s.d, &s.x, &overfit, &overfit, &CrossFitPlan::in_sample(1000), opts)?;
    println!("true theta {}", s.theta);
    println!("cross-fitted  {:.3} (se {:.3}, ci [{:.3}, {:.3}])", cf.theta, cf.se, cf.ci.0, cf.ci.1);
    println!("no cross-fit  {:.3} (se {:.3})", nocf.theta, nocf.se);
    for d in &cf.nuisances {
        println!("nuisance {d:?}");
    }
    Ok(())
}
