//! Trains briefly, then predicts the masked range of unit 0 by Monte Carlo.

use fedmgp::data::{gen_scenario, SyntheticSpec};
use fedmgp::fedrun::{run_federated, FedConfig, Transport};
use fedmgp::params::PriorHypers;
use fedmgp::predict::{mc_predict, VarianceEstimator};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = gen_scenario(&SyntheticSpec::default())?;
    let prior = PriorHypers {
        num_latents: 6,
        num_inducing: 15,
        ..PriorHypers::default()
    };
    let cfg = FedConfig {
        rounds: 300,
        local_steps: 2,
        learning_rate: 0.03,
        kernel_warmup_rounds: 150,
        ..FedConfig::default()
    };
    let fit = run_federated(&scenario.train, &prior, &cfg, Transport::InProc)?;
    let held = scenario.held_out_for(0).ok_or("unit 0 has no masked range")?;
    let personal = fit.personal_for(0).ok_or("unit 0 was not trained")?;
    let pm = mc_predict(&fit.global, personal, &held.inputs, 2000, 1, VarianceEstimator::TotalVariance)?;
    println!("mse on the masked range: {:.4}", pm.mse(&held.truth));
    pm.write_csv(&held.inputs, Some(&held.truth), std::io::stdout().lock())?;
    Ok(())
}
