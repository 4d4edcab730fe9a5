//! Policy learning with doubly robust signals: a shallow treatment tree learned
//! on one half and its value on the other, against treat-all and top-q rules.
//!
//! `cargo run --release --example policy`

use orthoml::cate::{dr_signal, optimal_policy_value, policy_learn_evaluate};
use orthoml::learners::{make_folds, LearnerSpec};
use orthoml::linalg::select_rows;
use orthoml::sim::generate;

fn main() -> orthoml::Result<()> {
    let n = 4000;
    let s = generate("dgp2", n, 3)?;
    let g: LearnerSpec = "forest:trees=100,min_leaf=10".parse()?;
    let m = LearnerSpec::Logistic { clip: 0.01 };
    let sig = dr_signal(&s.y, &s.d, &s.x, &g, &m, &make_folds(n, 5, 3)?, 0.01, 3)?;
    let (a, b): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % 2 == 0);
    let pick = |idx: &[usize]| idx.iter().map(|&i| sig.values[i]).collect::<Vec<f64>>();
    let cost = 0.05;
    let out = policy_learn_evaluate(&pick(&a), &select_rows(&s.x, &a), &pick(&b), &select_rows(&s.x, &b), 2, 50, cost, 0.05)?;
    let value = out.value.expect("evaluated on held-out rows");
    let treated = out.policy.treat(&select_rows(&s.x, &b)).iter().sum::<f64>() / b.len() as f64;
    println!("tree policy treats {:.1}% of held-out rows, net value {:.4} (se {:.4})", 100.0 * treated, value.theta, value.se);
    let all = optimal_policy_value(&pick(&b), &vec![1.0; b.len()], None, 0.05)?;
    println!("treat everyone: value {:.4} before cost {cost}", all.value.theta);
    Ok(())
}
