//! Heterogeneous effects end to end: meta-learners, scoring, Q-aggregation,
//! the BLP heterogeneity test, calibration and uplift curves.
//!
//! `cargo run --release --example cate_pipeline`

use orthoml::cate::{cate_pipeline, MetaKind, MetaLearners, PipelineOptions};
use orthoml::learners::LearnerSpec;
use orthoml::sim::{generate, sim_boost, sim_final};

fn main() -> orthoml::Result<()> {
    let s = generate("dgp3", 2000, 12)?;
    let (outcome, final_stage) = (sim_boost(), sim_final());
    let propensity = LearnerSpec::Logistic { clip: 0.01 };
    let learners = MetaLearners { outcome: &outcome, propensity: &propensity, effect: &outcome, final_stage: &final_stage, clip: 0.01 };
    let opts = PipelineOptions { seed: 12, ..PipelineOptions::default() };
    let p = cate_pipeline(&s.y, &s.d, &s.x, &s.x, &MetaKind::ALL, &learners, &opts)?;
    for ((kind, score), w) in p.kinds.iter().zip(&p.scores).zip(&p.ensemble.weights) {
        println!("{kind:<4} DR loss {:.4}  score {:+.4}  weight {w:.3}", score.loss, score.score);
    }
    if let Some(h) = &p.heterogeneity {
        println!("heterogeneity slope {:.3} (se {:.3}, p {:.4})", h.beta1, h.se1, h.p_value);
    }
    if let Some(c) = &p.calibration {
        println!("calibration CAL1 {:.4}, CAL2 {:.4}", c.cal1, c.cal2);
    }
    if let Some(u) = &p.uplift {
        println!("AUTOC {:.4} (se {:.4}), QINI area {:.4}", u.toc.area, u.toc.area_se, u.qini.area);
    }
    Ok(())
}
