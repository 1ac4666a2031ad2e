//! Draws the synthetic ten-unit scenario and writes it to disk.
//!
//!     cargo run --example gen_scenario -- out/scenario

use std::path::PathBuf;

use fedmgp::data::{gen_scenario, save_scenario, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map_or_else(|| PathBuf::from("target/scenario"), PathBuf::from);
    let scenario = gen_scenario(&SyntheticSpec {
        seed: 3,
        ..SyntheticSpec::default()
    })?;
    for unit in &scenario.train {
        let held = scenario.held_out_for(unit.unit_id).map_or(0, |h| h.truth.len());
        println!("unit {:2}: {:3} training rows, {:3} held out", unit.unit_id, unit.len(), held);
    }
    save_scenario(&scenario, &dir)?;
    println!("written to {}", dir.display());
    Ok(())
}
