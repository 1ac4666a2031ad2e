//! Every unconstrained coordinate of the unit gradient against central
//! finite differences of the unit objective.


use super::{random_data, random_global, random_personal};
use fedmgp::objective::{ModelKind, UnitProblem};
use fedmgp::params::{GlobalParams, PersonalParams, PriorHypers};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
/// Denominator floor so coordinates with a vanishing gradient are judged on
/// absolute error.
const FLOOR: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn check(seed: u64, kind: ModelKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=12);
    let l = rng.random_range(1..=3);
    let q = rng.random_range(2..=5);
    let d = rng.random_range(1..=2);
    let prior = PriorHypers {
        pi: rng.random_range(0.2..0.8),
        slab_variance: rng.random_range(0.5..2.0),
        num_latents: l,
        num_inducing: q,
    };
    let g = random_global(&mut rng, l, q, d);
    let p = random_personal(&mut rng, l);
    let data = random_data(&mut rng, 0, n, d);
    let weight = rng.random_range(0.1..1.0);
    let prob = UnitProblem::new(&data, &prior, kind, weight).unwrap();
    let grad = prob.gradient(&g, &p, None).unwrap();

    let shape = g.shape();
    let gflat = g.to_unconstrained();
    let pflat = p.to_unconstrained();
    let eval = |gv: &[f64], pv: &[f64]| {
        let g = GlobalParams::from_unconstrained(shape, gv).unwrap();
        let p = PersonalParams::from_unconstrained(l, pv).unwrap();
        prob.objective(&g, &p).unwrap().total
    };
    let mut worst: f64 = 0.0;
    for i in 0..gflat.len() {
        // pinned inclusion logits of the dense model are not free coordinates
        if kind == ModelKind::Dense && i >= shape.gamma_offset() {
            continue;
        }
        let (mut up, mut dn) = (gflat.clone(), gflat.clone());
        up[i] += STEP;
        dn[i] -= STEP;
        let fd = (eval(&up, &pflat) - eval(&dn, &pflat)) / (2.0 * STEP);
        let e = rel_err(grad.global[i], fd);
        assert!(e < 1e-4, "seed {seed} {kind:?} global coordinate {i}: analytic {} fd {fd}", grad.global[i]);
        worst = worst.max(e);
    }
    for i in 0..pflat.len() {
        let (mut up, mut dn) = (pflat.clone(), pflat.clone());
        up[i] += STEP;
        dn[i] -= STEP;
        let fd = (eval(&gflat, &up) - eval(&gflat, &dn)) / (2.0 * STEP);
        let e = rel_err(grad.personal[i], fd);
        assert!(e < 1e-4, "seed {seed} {kind:?} personal coordinate {i}: analytic {} fd {fd}", grad.personal[i]);
        worst = worst.max(e);
    }
    worst
}

pub fn spike_slab_gradient_matches_central_differences() {
    let worst = (0..20).map(|s| check(s, ModelKind::SpikeSlab)).fold(0.0, f64::max);
    println!("worst relative error {worst:.2e}");
}

pub fn dense_gradient_matches_central_differences() {
    let worst = (100..120).map(|s| check(s, ModelKind::Dense)).fold(0.0, f64::max);
    println!("worst relative error {worst:.2e}");
}
