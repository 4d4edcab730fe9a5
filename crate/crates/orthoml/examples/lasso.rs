//! Plug-in Lasso, Post-Lasso and cross-validated penalties on a sparse design.
//!
//! `cargo run --release --example lasso`

use orthoml::learners::make_folds;
use orthoml::penalized::{cv_fit, lasso_plugin, plugin_lambda, post_lasso, Penalty, PluginOptions};
use orthoml::sim::generate;

fn main() -> orthoml::Result<()> {
    let s = generate("example_3_1_1", 300, 7)?;
    let opts = PluginOptions::default();
    let pl = plugin_lambda(&s.x, &s.y, opts)?;
    let fit = lasso_plugin(&s.x, &s.y, opts)?;
    println!("plug-in lambda {:.2}, {} of {} regressors selected: {:?}", pl.lambda, fit.active.len(), s.x.ncols(), fit.active);
    println!("KKT gap {:.2e}", fit.kkt_gap);
    let post = post_lasso(&s.x, &s.y, &fit)?;
    let shown: Vec<String> = fit.active.iter().map(|&j| format!("b{j} {:.3} -> {:.3}", fit.coefficients[j], post.model().coefficients[j])).collect();
    println!("lasso -> post-lasso: {}", shown.join(", "));

    let grid: Vec<Penalty> = (0..12).map(|k| Penalty::Lasso(2f64.powi(k) * 2.0)).collect();
    let cv = cv_fit(&s.x, &s.y, &grid, &make_folds(300, 5, 1)?)?;
    println!("cross-validated penalty {:?} (cv mse {:.3})", cv.selected, cv.cv_mse[cv.selected_index]);
    Ok(())
}
