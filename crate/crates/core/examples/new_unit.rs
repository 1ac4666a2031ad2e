//! Onboards a unit that never took part in training: the federated latent
//! functions stay fixed and only its coefficients and noise are fitted.

use fedmgp::data::{gen_scenario, MaskSpec, SyntheticSpec};
use fedmgp::fedrun::{run_federated, FedConfig, Transport};
use fedmgp::params::{PersonalParams, PriorHypers};
use fedmgp::predict::{new_unit_fit, new_unit_predict, select_latents, NewUnitConfig};

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
    let personal: Vec<PersonalParams> = fit.personal.iter().map(|(_, p)| p.clone()).collect();
    let sel = select_latents(&fit.global, &personal, 0.5, 1e-10);
    let reduced = fit.global.restrict(&sel.selected)?;

    let fresh = gen_scenario(&SyntheticSpec {
        num_units: 1,
        first_unit_id: 100,
        missing: vec![MaskSpec {
            unit_id: 100,
            length: 2.0,
        }],
        seed: 99,
        ..SyntheticSpec::default()
    })?;
    let unit = &fresh.train[0];
    let held = fresh.held_out_for(unit.unit_id).ok_or("no masked range")?;
    let nu = new_unit_fit(&reduced, unit, &NewUnitConfig::default())?;
    let pm = new_unit_predict(&reduced, &nu.w, nu.log_noise, &held.inputs)?;
    println!("{} selected latents, coefficients {:?}", sel.count(), nu.w);
    println!("noise {:.3}, {:.1} us per step", nu.noise(), nu.seconds_per_step() * 1e6);
    println!("mse on the masked range: {:.4}", pm.mse(&held.truth));
    Ok(())
}
