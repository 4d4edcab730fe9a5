//! Nuisance learners: trees, forests and boosting, compared by cross-fitted MSPE.
//!
//! `cargo run --release --example learners`

use orthoml::learners::{learner_select, make_folds, Learner, LearnerSpec};
use orthoml::sim::generate;

fn main() -> orthoml::Result<()> {
    let s = generate("plm_smooth", 600, 2)?;
    let specs = ["mean", "ols", "lasso", "tree:depth=4,min_leaf=10", "forest:trees=100,min_leaf=5", "boost:steps=100,rate=0.1,depth=2"];
    let parsed: Vec<LearnerSpec> = specs.iter().map(|s| s.parse()).collect::<orthoml::Result<_>>()?;
    let candidates: Vec<&dyn Learner> = parsed.iter().map(|l| l as &dyn Learner).collect();
    let plan = make_folds(600, 5, 11)?;
    let sel = learner_select(&candidates, &s.x, &s.y, &plan, 11)?;
    for (spec, mspe) in parsed.iter().zip(&sel.mspe) {
        println!("{:<48} MSPE {mspe:.4}", spec.to_string());
    }
    println!("selected: {}", parsed[sel.best]);
    Ok(())
}
