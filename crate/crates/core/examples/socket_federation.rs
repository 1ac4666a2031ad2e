//! A server and three units talking over loopback TCP. The same run over
//! the in-process transport gives the same objective trace.

use fedmgp::data::{gen_scenario, SyntheticSpec};
use fedmgp::fedrun::{join, run_federated, serve, FedConfig, Transport};
use fedmgp::params::PriorHypers;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = gen_scenario(&SyntheticSpec {
        num_units: 3,
        points_per_unit: 40,
        ..SyntheticSpec::default()
    })?;
    let prior = PriorHypers {
        num_latents: 4,
        num_inducing: 10,
        ..PriorHypers::default()
    };
    let cfg = FedConfig {
        rounds: 20,
        local_steps: 2,
        learning_rate: 0.03,
        ..FedConfig::default()
    };

    let server = serve("127.0.0.1:0", prior, cfg.clone(), scenario.train.len())?;
    let addr = server.local_addr();
    println!("server on {addr}");
    let units: Vec<_> = scenario
        .train
        .iter()
        .map(|d| join(addr, d.clone(), prior, cfg.clone()))
        .collect::<Result<_, _>>()?;
    let mut objectives = Vec::new();
    for u in units {
        let out = u.wait()?;
        objectives.push((out.unit_id, out.records.last().map(|r| r.objective)));
    }
    let done = server.wait()?;
    println!("units {:?}, last objectives {objectives:?}", done.unit_ids);

    let socket = run_federated(&scenario.train, &prior, &cfg, Transport::Socket(([127, 0, 0, 1], 0).into()))?;
    let inproc = run_federated(&scenario.train, &prior, &cfg, Transport::InProc)?;
    let gap = socket
        .log
        .aggregated_trace()
        .iter()
        .zip(inproc.log.aggregated_trace())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("largest trace difference between transports: {gap:e}");
    Ok(())
}
