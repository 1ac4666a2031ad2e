//! Trains the spike-and-slab federation in one process and reports which
//! latent functions survived.

use fedmgp::data::{gen_scenario, SyntheticSpec};
use fedmgp::fedrun::{run_federated, FedConfig, Transport};
use fedmgp::params::{PersonalParams, PriorHypers};
use fedmgp::predict::select_latents;

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
    let trace = fit.log.aggregated_trace();
    println!("objective {:.2} -> {:.2}", trace[0], trace[trace.len() - 1]);

    let personal: Vec<PersonalParams> = fit.personal.iter().map(|(_, p)| p.clone()).collect();
    let sel = select_latents(&fit.global, &personal, 0.5, 1e-10);
    for l in 0..sel.gamma.len() {
        println!("latent {l}: gamma {:.3} energy {:.3e}", sel.gamma[l], sel.coeff_energy[l]);
    }
    println!("selected {:?}", sel.selected);
    Ok(())
}
