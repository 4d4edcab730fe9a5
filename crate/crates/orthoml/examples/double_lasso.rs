//! Naive single selection against orthogonal Double Lasso for one effect.
//!
//! `cargo run --release --example double_lasso`

use orthoml::double_lasso::{double_lasso, double_selection, naive_single_selection};
use orthoml::penalized::{LambdaRule, PluginOptions};
use orthoml::sim::generate;

fn main() -> orthoml::Result<()> {
    let s = generate("example_4_3_1", 500, 3)?;
    let rule = LambdaRule::default();
    let naive = naive_single_selection(&s.y, &s.d, &s.x, PluginOptions::default(), 0.05)?;
    let dl = double_lasso(&s.y, &s.d, &s.x, &rule, 0.05)?;
    let ds = double_selection(&s.y, &s.d, &s.x, &rule, 0.05)?;
    println!("true effect {}", s.theta);
    for r in [&naive, &dl, &ds] {
        println!("{:<18} {:.3} (se {:.3}, ci [{:.3}, {:.3}])", r.method, r.estimates[0], r.se[0], r.ci[0].0, r.ci[0].1);
    }
    Ok(())
}
