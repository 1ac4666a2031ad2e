//! A thousand random instances, deliberately including near-duplicate
//! inducing points, extreme hyperparameters and saturated inclusion
//! probabilities. Divergences must be non-negative and every covariance
//! that gets factorized or reported must stay positive semi-definite.


use super::random_personal;
use fedmgp::kernels::{chol_jittered, cov_symmetric, default_jitter, whiten, InducingSet, KernelParams};
use fedmgp::objective::{kl_latent, kl_spike_slab, ModelKind, UnitProblem};
use fedmgp::params::{GlobalParams, LatentFunction, LatentVariational, PriorHypers, TriFactor, UnitDataset};
use fedmgp::predict::{mc_predict, VarianceEstimator};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn extreme_global(rng: &mut impl Rng, latents: usize, q: usize) -> GlobalParams {
    let lat = (0..latents)
        .map(|_| {
            let spacing = if rng.random_bool(0.3) { 1e-4 } else { rng.random_range(0.05..1.0) };
            let z = DMatrix::from_fn(q, 1, |i, _| i as f64 * spacing + rng.random_range(0.0..1e-6));
            LatentFunction {
                variational: LatentVariational {
                    mean: DVector::from_fn(q, |_, _| rng.random_range(-3.0..3.0)),
                    cov_factor: TriFactor::from_parts(
                        (0..q).map(|_| rng.random_range(-6.0..2.0)).collect(),
                        (0..TriFactor::strict_len(q)).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    )
                    .unwrap(),
                },
                kernel: KernelParams {
                    log_variance: rng.random_range(-6.0..4.0),
                    log_lengthscale: rng.random_range(-3.0..3.0),
                },
                inducing: InducingSet::new(z).unwrap(),
            }
        })
        .collect();
    let logits = (0..latents)
        .map(|_| match rng.random_range(0..4) {
            0 => 40.0,
            1 => -40.0,
            _ => rng.random_range(-6.0..6.0),
        })
        .collect();
    GlobalParams::new(lat, logits).unwrap()
}

pub fn divergences_and_covariances_over_a_thousand_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = Vec::new();
    for i in 0..1000 {
        let l = rng.random_range(1..=4);
        let q = rng.random_range(1..=12);
        let n = rng.random_range(1..=15);
        let g = extreme_global(&mut rng, l, q);
        let p = random_personal(&mut rng, l);
        let prior = PriorHypers {
            pi: rng.random_range(1e-6..1.0 - 1e-6),
            slab_variance: rng.random_range(0.01..10.0),
            num_latents: l,
            num_inducing: q,
        };
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..3.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let data = UnitDataset::from_1d(0, &xs, &ys).unwrap();

        let kss = kl_spike_slab(&p, &g.gamma(), &prior);
        if !(kss >= -1e-12) {
            violations.push(format!("instance {i}: spike-slab KL {kss}"));
        }
        for lf in &g.latents {
            let kl = kl_latent(&lf.variational);
            if !(kl >= -1e-12) {
                violations.push(format!("instance {i}: latent KL {kl}"));
            }
            let kzz = cov_symmetric(lf.inducing.points(), &lf.kernel);
            match chol_jittered(&kzz, default_jitter(&kzz)) {
                Ok(c) if c.l().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) => {}
                Ok(_) => violations.push(format!("instance {i}: degenerate factor")),
                Err(e) => violations.push(format!("instance {i}: {e}")),
            }
            match whiten(data.inputs(), &lf.inducing, &lf.kernel) {
                Ok(w) if w.residual_diag.iter().all(|v| *v >= 0.0 && v.is_finite()) => {}
                Ok(_) => violations.push(format!("instance {i}: negative residual variance")),
                Err(e) => violations.push(format!("instance {i}: {e}")),
            }
        }
        for kind in [ModelKind::SpikeSlab, ModelKind::Dense] {
            match UnitProblem::new(&data, &prior, kind, 0.5).and_then(|pr| pr.objective(&g, &p)) {
                Ok(b) if b.total.is_finite() && b.kl_coeff >= -1e-12 && b.kl_latent_weighted >= -1e-12 => {}
                Ok(b) => violations.push(format!("instance {i} {kind:?}: {b:?}")),
                Err(e) => violations.push(format!("instance {i} {kind:?}: {e}")),
            }
        }
        let x_star = DMatrix::from_fn(4, 1, |r, _| -2.0 + r as f64 * 1.5);
        for est in [VarianceEstimator::TotalVariance, VarianceEstimator::Literal] {
            match mc_predict(&g, &p, &x_star, 20, i, est) {
                Ok(pm) if pm.variance.iter().all(|v| *v > 0.0 && v.is_finite()) => {}
                Ok(pm) => violations.push(format!("instance {i}: predictive variance {:?}", pm.variance)),
                Err(e) => violations.push(format!("instance {i}: {e}")),
            }
        }
    }
    assert!(violations.is_empty(), "{} violations:\n{}", violations.len(), violations.join("\n"));
}
