//! Full synthetic benchmark: igp, fedlmc and fedlmc_ss over ten repeats,
//! then the new-unit regimes. Writes the report into `target/benchmark` or the
//! directory given as the first argument.
//!
//!     cargo run --release --example benchmark -- out/benchmark 3

use std::path::PathBuf;
use std::time::Instant;

use fedmgp::bench::{emit_report, run_benchmark, BenchModel, ExperimentConfig, NewUnitExperimentConfig, SUMMARY_FILE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| PathBuf::from("target/benchmark"), PathBuf::from);
    let repeats = args.next().map(|r| r.parse()).transpose()?.unwrap_or(10);

    let cfg = ExperimentConfig {
        repeats,
        ..ExperimentConfig::default()
    };
    let started = Instant::now();
    let records = run_benchmark(&cfg, &BenchModel::ALL, Some(&NewUnitExperimentConfig::default()))?;
    emit_report(&records, &out)?;
    println!("{}", std::fs::read_to_string(out.join(SUMMARY_FILE))?);
    println!("total {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
