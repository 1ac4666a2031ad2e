use super::toy_units;
use fedmgp::fedrun::{self, pre_processing, run_federated, FedConfig, Transport};
use fedmgp::objective::{ModelKind, UnitProblem};
use fedmgp::params::{GlobalParams, PersonalParams, PriorHypers};

fn prior(latents: usize) -> PriorHypers {
    PriorHypers {
        num_latents: latents,
        num_inducing: 6,
        ..PriorHypers::default()
    }
}

fn socket() -> Transport {
    Transport::Socket(([127, 0, 0, 1], 0).into())
}

/// Plain Adam ascent written out here, over the joint vector of one unit.
struct RefAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    fn step(&mut self, cfg: &FedConfig, x: &mut [f64], g: &[f64]) {
        let (b1, b2) = cfg.adam_betas;
        self.t += 1;
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            x[i] += cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

fn centralized(kind: ModelKind, steps: usize, latents: usize, n: usize, learning_rate: f64) {
    let units = toy_units(1, n);
    let prior = prior(latents);
    let cfg = FedConfig {
        rounds: 4,
        local_steps: steps,
        learning_rate,
        model: kind,
        ..FedConfig::default()
    };
    let fed = run_federated(&units, &prior, &cfg, Transport::InProc).unwrap();

    let (g0, p0) = pre_processing(&units, &prior, &cfg).unwrap();
    let shape = g0.shape();
    let glen = shape.len();
    // inducing locations stay put; the dense model also pins its inclusion logits
    let mut free = vec![true; glen];
    for l in 0..shape.latents {
        let start = shape.latent_offset(l) + shape.inducing_offset();
        free[start..start + shape.inducing * shape.dim].fill(false);
    }
    if kind == ModelKind::Dense {
        free[shape.gamma_offset()..].fill(false);
    }
    let mut x = g0.to_unconstrained();
    x.extend(p0[0].to_unconstrained());
    let mut adam = RefAdam {
        m: vec![0.0; x.len()],
        v: vec![0.0; x.len()],
        t: 0,
    };
    let prob = UnitProblem::new(&units[0], &prior, kind, 1.0).unwrap();
    for _ in 0..cfg.rounds * cfg.local_steps {
        let g = GlobalParams::from_unconstrained(shape, &x[..glen]).unwrap();
        let p = PersonalParams::from_unconstrained(shape.latents, &x[glen..]).unwrap();
        let ug = prob.gradient(&g, &p, None).unwrap();
        let mut grad: Vec<f64> = ug.global.iter().zip(&free).map(|(v, f)| if *f { *v } else { 0.0 }).collect();
        grad.extend(&ug.personal);
        adam.step(&cfg, &mut x, &grad);
    }
    let got: Vec<f64> = fed
        .global
        .to_unconstrained()
        .into_iter()
        .chain(fed.personal[0].1.to_unconstrained())
        .collect();
    assert_eq!(got.len(), x.len());
    for (i, (a, b)) in got.iter().zip(&x).enumerate() {
        assert!((a - b).abs() <= 1e-12, "{kind:?} coordinate {i}: federated {a}, centralized {b}");
    }
}

pub fn single_unit_federation_is_centralized_ascent() {
    for c in 0..20usize {
        let kind = if c % 2 == 0 { ModelKind::SpikeSlab } else { ModelKind::Dense };
        centralized(kind, 1 + c % 5, 1 + c % 4, 6 + 3 * c, 0.005 * (1 + c % 6) as f64);
    }
}

pub fn socket_trace_equals_in_process_trace() {
    let units = toy_units(3, 12);
    let prior = prior(3);
    let cfg = FedConfig {
        rounds: 5,
        local_steps: 4,
        learning_rate: 0.02,
        ..FedConfig::default()
    };
    let a = run_federated(&units, &prior, &cfg, Transport::InProc).unwrap();
    let b = run_federated(&units, &prior, &cfg, socket()).unwrap();
    let (ta, tb) = (a.log.aggregated_trace(), b.log.aggregated_trace());
    assert_eq!(ta.len(), 5);
    for (x, y) in ta.iter().zip(&tb) {
        assert!((x - y).abs() <= 1e-12, "in-proc {x} socket {y}");
    }
    for (ra, rb) in a.log.rounds.iter().zip(&b.log.rounds) {
        assert_eq!(ra.unit_ids, rb.unit_ids);
    }
    assert_eq!(a.global, b.global);
    assert_eq!(a.personal, b.personal);
}

pub fn fixed_seed_runs_are_bitwise_identical() {
    let units = toy_units(3, 12);
    let prior = prior(3);
    let cfg = FedConfig {
        rounds: 6,
        local_steps: 3,
        learning_rate: 0.02,
        batch_size: fedrun::BatchSize::Rows(5),
        seed: 11,
        ..FedConfig::default()
    };
    let bits = |g: &GlobalParams| g.to_unconstrained().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let runs: Vec<_> = [Transport::InProc, Transport::InProc, socket()]
        .into_iter()
        .map(|t| run_federated(&units, &prior, &cfg, t).unwrap())
        .collect();
    assert_eq!(bits(&runs[0].global), bits(&runs[1].global));
    assert_eq!(bits(&runs[0].global), bits(&runs[2].global));
    let other = run_federated(&units, &prior, &FedConfig { seed: 12, ..cfg }, Transport::InProc).unwrap();
    assert_ne!(bits(&runs[0].global), bits(&other.global));
}

pub fn zero_round_server_returns_the_initial_parameters() {
    let units = toy_units(2, 8);
    let prior = prior(2);
    let cfg = FedConfig {
        rounds: 0,
        ..FedConfig::default()
    };
    let server = fedrun::serve("127.0.0.1:0", prior, cfg.clone(), 2).unwrap();
    let addr = server.local_addr();
    let handles: Vec<_> = units
        .iter()
        .map(|u| fedrun::join(addr, u.clone(), prior, cfg.clone()).unwrap())
        .collect();
    let outcome = server.wait().unwrap();
    let (g0, p0) = pre_processing(&units, &prior, &cfg).unwrap();
    assert_eq!(outcome.global, g0);
    assert!(outcome.round_seconds.is_empty());
    for (h, p) in handles.into_iter().zip(p0) {
        let u = h.wait().unwrap();
        assert!(u.records.is_empty());
        assert_eq!(u.personal, p);
        assert_eq!(u.global, g0);
    }
}

pub fn objective_improves_over_the_run() {
    let units = toy_units(4, 20);
    let cfg = FedConfig {
        rounds: 40,
        local_steps: 5,
        learning_rate: 0.02,
        ..FedConfig::default()
    };
    let fit = run_federated(&units, &prior(3), &cfg, Transport::InProc).unwrap();
    let trace = fit.log.aggregated_trace();
    let median = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(&trace[20..]) > median(&trace[..20]));
    assert!(fit.log.rounds.iter().all(|r| r.failed_units.is_empty()));
}
