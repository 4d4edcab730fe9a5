//! A small Monte Carlo study through the simulation registry.
//!
//! `cargo run --release --example monte_carlo`

use orthoml::sim::{self, SimOptions};

fn main() -> orthoml::Result<()> {
    for d in sim::DGPS {
        println!("{:<15} {}", d.name, d.description);
    }
    let est = ["dml_pliv".to_string(), "c_stat".to_string()];
    let rep = sim::run_simulation("weak_iv", 500, 200, 1, &est, &SimOptions::default())?;
    print!("\n{}", rep.summary_csv());
    Ok(())
}
