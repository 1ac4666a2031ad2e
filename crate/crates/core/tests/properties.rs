mod common;

use common::{random_data, random_global, random_personal};
use fedmgp::fedrun::{central_update, FedConfig, UnitState};
use fedmgp::kernels::whiten;
use fedmgp::objective::{expected_loglik, kl_latent, kl_spike_slab, ModelKind, UnitProblem, PINNED_GAMMA_LOGIT};
use fedmgp::params::{average_globals, GlobalParams, PersonalParams, PriorHypers, RoundMessage, TriFactor, UnitDataset};
use fedmgp::predict::{mc_predict, new_unit_fit, new_unit_predict, select_latents, NewUnitConfig, VarianceEstimator};
use fedmgp::optim::AdamConfig;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn prior_for(g: &GlobalParams, rng: &mut impl Rng) -> PriorHypers {
    PriorHypers {
        pi: rng.random_range(0.1..0.9),
        slab_variance: rng.random_range(0.5..2.0),
        num_latents: g.num_latents(),
        num_inducing: g.shape().inducing,
    }
}

#[test]
fn unit_objectives_sum_to_the_federated_elbo() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..30 {
        let m = 1 + trial % 3;
        let l = rng.random_range(1..=3);
        let g = random_global(&mut rng, l, 4, 1);
        let prior = prior_for(&g, &mut rng);
        let units: Vec<UnitDataset> = (0..m).map(|u| {
            let n = rng.random_range(2..10);
            random_data(&mut rng, u as u32, n, 1)
        }).collect();
        let personal: Vec<PersonalParams> = (0..m).map(|_| random_personal(&mut rng, l)).collect();
        let total_n: f64 = units.iter().map(|u| u.len() as f64).sum();

        let summed: f64 = units
            .iter()
            .zip(&personal)
            .map(|(u, p)| {
                UnitProblem::new(u, &prior, ModelKind::SpikeSlab, u.len() as f64 / total_n)
                    .unwrap()
                    .objective(&g, p)
                    .unwrap()
                    .total
            })
            .sum();
        let gamma = g.gamma();
        let direct: f64 = units
            .iter()
            .zip(&personal)
            .map(|(u, p)| expected_loglik(u, None, &g, p).unwrap() - kl_spike_slab(p, &gamma, &prior))
            .sum::<f64>()
            - g.latents.iter().map(|lf| kl_latent(&lf.variational)).sum::<f64>();
        assert!((summed - direct).abs() <= 1e-8 * direct.abs().max(1.0), "M={m}: {summed} vs {direct}");
    }
}

#[test]
fn two_identical_units_match_the_pooled_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = random_global(&mut rng, 2, 3, 1);
    let prior = prior_for(&g, &mut rng);
    let unit = random_data(&mut rng, 0, 6, 1);
    let p = random_personal(&mut rng, 2);
    let half = UnitProblem::new(&unit, &prior, ModelKind::SpikeSlab, 0.5).unwrap().objective(&g, &p).unwrap();

    let x = unit.inputs();
    let pooled_x = DMatrix::from_fn(12, 1, |i, _| x[(i % 6, 0)]);
    let pooled_y = DVector::from_fn(12, |i, _| unit.outputs()[i % 6]);
    let pooled = UnitDataset::new(0, pooled_x, pooled_y).unwrap();
    let whole = UnitProblem::new(&pooled, &prior, ModelKind::SpikeSlab, 1.0).unwrap().objective(&g, &p).unwrap();
    // the pooled model carries one coefficient KL, the pair carries two
    let pair = 2.0 * half.total;
    assert!((pair - (whole.total - half.kl_coeff)).abs() < 1e-9 * pair.abs().max(1.0));
}

#[test]
fn dense_model_nests_inside_spike_slab_as_pi_tends_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = random_global(&mut rng, 3, 4, 1);
    g.gamma_logit = vec![PINNED_GAMMA_LOGIT; 3];
    assert!(g.gamma().iter().all(|v| *v == 1.0));
    let prior = PriorHypers {
        pi: 1.0 - 1e-9,
        ..prior_for(&g, &mut rng)
    };
    let data = random_data(&mut rng, 0, 7, 1);
    let p = random_personal(&mut rng, 3);
    let ss = UnitProblem::new(&data, &prior, ModelKind::SpikeSlab, 1.0).unwrap().objective(&g, &p).unwrap();
    let dense = UnitProblem::new(&data, &prior, ModelKind::Dense, 1.0).unwrap().objective(&g, &p).unwrap();

    // Gaussian part of the coefficient divergence, written out independently
    let sv = prior.slab_variance;
    let gauss: f64 = (0..3)
        .map(|l| {
            let (mu, s) = (p.mu_w[l], p.log_sigma_w[l].exp());
            0.5 * ((sv / (s * s)).ln() + (s * s + mu * mu) / sv - 1.0)
        })
        .sum();
    let spike_term = -3.0 * prior.pi.ln();
    assert!(spike_term.abs() < 1e-8);
    let nested = dense.total - spike_term - gauss;
    assert!((ss.total - nested).abs() < 1e-9 * ss.total.abs().max(1.0), "{} vs {nested}", ss.total);
    assert_eq!(ss.expected_loglik, dense.expected_loglik);
}

#[test]
fn small_local_steps_ascend() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut up = 0;
    for _ in 0..100 {
        let l = rng.random_range(1..=3);
        let g = random_global(&mut rng, l, 4, 1);
        let prior = prior_for(&g, &mut rng);
        let n = rng.random_range(3..10);
        let data = random_data(&mut rng, 0, n, 1);
        let p = random_personal(&mut rng, l);
        let cfg = FedConfig {
            local_steps: 1,
            learning_rate: 1e-4,
            ..FedConfig::default()
        };
        let before = UnitProblem::new(&data, &prior, cfg.model, 0.5).unwrap().objective(&g, &p).unwrap().total;
        let mut state = UnitState::new(data.clone(), p, &cfg);
        let g1 = state.local_update(&g, 1, 0.5, &prior, &cfg).unwrap();
        let after = UnitProblem::new(&data, &prior, cfg.model, 0.5)
            .unwrap()
            .objective(&g1, &state.personal)
            .unwrap()
            .total;
        up += usize::from(after > before);
    }
    assert!(up >= 95, "objective rose in only {up} of 100 instances");
}

#[test]
fn one_local_step_matches_a_hand_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = random_global(&mut rng, 2, 3, 1);
    let prior = prior_for(&g, &mut rng);
    let data = random_data(&mut rng, 0, 8, 1);
    let p = random_personal(&mut rng, 2);
    let cfg = FedConfig {
        local_steps: 1,
        learning_rate: 0.05,
        ..FedConfig::default()
    };
    let grad = UnitProblem::new(&data, &prior, cfg.model, 0.25).unwrap().gradient(&g, &p, None).unwrap();
    let mut state = UnitState::new(data, p.clone(), &cfg);
    let g1 = state.local_update(&g, 1, 0.25, &prior, &cfg).unwrap();

    // first Adam step: bias-corrected moments are g and g^2
    let step = |x: f64, gr: f64| x + cfg.learning_rate * gr / (gr.abs() + cfg.adam_eps);
    let shape = g.shape();
    let frozen = |i: usize| {
        (0..shape.latents).any(|l| {
            let s = shape.latent_offset(l) + shape.inducing_offset();
            (s..s + shape.inducing).contains(&i)
        })
    };
    for (i, (x1, x0)) in g1.to_unconstrained().iter().zip(g.to_unconstrained()).enumerate() {
        let want = if frozen(i) { x0 } else { step(x0, grad.global[i]) };
        assert!((x1 - want).abs() < 1e-14, "global {i}: {x1} vs {want}");
    }
    for (i, (x1, x0)) in state.personal.to_unconstrained().iter().zip(p.to_unconstrained()).enumerate() {
        let want = step(x0, grad.personal[i]);
        assert!((x1 - want).abs() < 1e-14, "personal {i}: {x1} vs {want}");
    }
}

#[test]
fn central_update_delegates_to_weighted_averaging() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shape_source = random_global(&mut rng, 2, 3, 1);
    let items: Vec<(GlobalParams, f64)> = (0..4)
        .map(|_| {
            let mut v = shape_source.to_unconstrained();
            for x in v.iter_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
            (GlobalParams::from_unconstrained(shape_source.shape(), &v).unwrap(), rng.random_range(1.0..50.0))
        })
        .collect();
    let msgs: Vec<RoundMessage> = items.iter().map(|(g, w)| RoundMessage::new(2, *w, g)).collect();
    assert_eq!(central_update(&msgs, 2).unwrap(), average_globals(&items).unwrap());
}

#[test]
fn predictive_mean_converges_to_the_analytic_mean() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let g = random_global(&mut rng, 3, 4, 1);
        let p = random_personal(&mut rng, 3);
        let x_star = DMatrix::from_fn(5, 1, |i, _| -1.5 + 0.7 * i as f64);
        let gamma = g.gamma();
        let mut exact = DVector::zeros(5);
        for (l, lf) in g.latents.iter().enumerate() {
            let w = whiten(&x_star, &lf.inducing, &lf.kernel).unwrap();
            exact += (&w.b * &lf.variational.mean) * (gamma[l] * p.mu_w[l]);
        }
        // standard error from independent batches of the estimator itself
        let batches: Vec<DVector<f64>> = (0..10)
            .map(|b| mc_predict(&g, &p, &x_star, 10_000, seed * 100 + b, VarianceEstimator::TotalVariance).unwrap().mean)
            .collect();
        let mean = batches.iter().fold(DVector::zeros(5), |a, b| a + b) / 10.0;
        for i in 0..5 {
            let var = batches.iter().map(|b| (b[i] - mean[i]).powi(2)).sum::<f64>() / 9.0;
            let se = (var / 10.0).sqrt();
            assert!((mean[i] - exact[i]).abs() <= 4.0 * se + 1e-12, "seed {seed} point {i}");
        }
        let big = mc_predict(&g, &p, &x_star, 100_000, 77, VarianceEstimator::TotalVariance).unwrap();
        let huge = mc_predict(&g, &p, &x_star, 1_000_000, 78, VarianceEstimator::TotalVariance).unwrap();
        for i in 0..5 {
            let var = batches.iter().map(|b| (b[i] - mean[i]).powi(2)).sum::<f64>() / 9.0;
            let se_big = (var / 10.0).sqrt();
            assert!((big.mean[i] - huge.mean[i]).abs() <= 4.0 * se_big + 1e-12);
            assert!(big.variance[i] >= p.noise().powi(2));
        }
    }
}

#[test]
fn new_unit_recovers_planted_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = random_global(&mut rng, 3, 8, 1);
    // a concentrated q(u): the trace term is a ridge penalty on w, which
    // would otherwise shrink the planted coefficients
    for lf in g.latents.iter_mut() {
        lf.variational.cov_factor = TriFactor::from_parts(vec![-5.0; 8], vec![0.0; TriFactor::strict_len(8)]).unwrap();
    }
    let xs: Vec<f64> = (0..40).map(|i| -0.8 + 4.0 * i as f64 / 39.0).collect();
    let x = DMatrix::from_column_slice(40, 1, &xs);
    let planted = [1.2, -0.7, 0.4];
    let mut y = DVector::zeros(40);
    for (lf, c) in g.latents.iter().zip(planted) {
        let w = whiten(&x, &lf.inducing, &lf.kernel).unwrap();
        y += (&w.b * &lf.variational.mean) * c;
    }
    y = y.map(|v| v + 0.01 * rng.random_range(-1.7..1.7));
    let data = UnitDataset::new(5, x, y).unwrap();
    let fit = new_unit_fit(
        &g,
        &data,
        &NewUnitConfig {
            steps: 3000,
            adam: AdamConfig {
                learning_rate: 0.02,
                ..AdamConfig::default()
            },
        },
    )
    .unwrap();
    let dot: f64 = fit.w.iter().zip(planted).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cosine = dot / (norm(&fit.w) * norm(&planted));
    assert!(cosine > 0.95, "cosine {cosine}, w {:?}", fit.w);
}

#[test]
fn new_unit_prediction_equals_point_mass_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut g = random_global(&mut rng, 2, 4, 1);
    g.gamma_logit = vec![PINNED_GAMMA_LOGIT; 2];
    let w = vec![0.8, -1.3];
    let log_noise = -1.1;
    let x_star = DMatrix::from_fn(6, 1, |i, _| -1.0 + 0.5 * i as f64);
    let direct = new_unit_predict(&g, &w, log_noise, &x_star).unwrap();
    let point = PersonalParams {
        mu_w: w.clone(),
        log_sigma_w: vec![-800.0; 2],
        log_noise,
    };
    let mc = mc_predict(&g, &point, &x_star, 1, 3, VarianceEstimator::TotalVariance).unwrap();
    for i in 0..6 {
        assert!((direct.mean[i] - mc.mean[i]).abs() < 1e-12);
        assert!((direct.variance[i] - mc.variance[i]).abs() < 1e-12);
    }
}

#[test]
fn selection_follows_latent_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut g = random_global(&mut rng, 5, 3, 1);
    g.gamma_logit = vec![3.0, -3.0, 2.0, 4.0, -1.0];
    let mut personal: Vec<PersonalParams> = (0..3).map(|_| random_personal(&mut rng, 5)).collect();
    for p in personal.iter_mut() {
        p.mu_w[2] = 0.0;
    }
    let base = select_latents(&g, &personal, 0.5, 1e-10);
    assert_eq!(base.selected, vec![0, 3]);
    let perm = [4, 2, 0, 3, 1];
    let gp = g.restrict(&perm).unwrap();
    let pp: Vec<PersonalParams> = personal.iter().map(|p| p.restrict(&perm)).collect();
    let permuted = select_latents(&gp, &pp, 0.5, 1e-10);
    let mut mapped: Vec<usize> = permuted.selected.iter().map(|&i| perm[i]).collect();
    mapped.sort_unstable();
    assert_eq!(mapped, base.selected);
}
