//! Closed-form ELBO terms against plain Monte-Carlo estimates that only use
//! sampling and Gaussian densities.


use super::{gram, random_data, random_global, random_personal};
use fedmgp::objective::{expected_loglik, kl_latent, kl_spike_slab};
use fedmgp::params::{GlobalParams, LatentFunction, PersonalParams, PriorHypers, UnitDataset};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

const SAMPLES: usize = 100_000;
const INSTANCES: u64 = 20;

struct Estimate {
    mean: f64,
    se: f64,
}

fn estimate(draws: impl Iterator<Item = f64>) -> Estimate {
    let (mut n, mut sum, mut sum2) = (0.0, 0.0, 0.0);
    for v in draws {
        n += 1.0;
        sum += v;
        sum2 += v * v;
    }
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Estimate {
        mean,
        se: (var / n).sqrt(),
    }
}

fn within(exact: f64, est: &Estimate, what: &str, seed: u64) {
    let tol = 3.0 * est.se + 1e-12 * exact.abs();
    assert!(
        (exact - est.mean).abs() <= tol,
        "{what} instance {seed}: closed form {exact}, MC {} ± {}",
        est.mean,
        est.se
    );
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (x - mean).powi(2) / var
}

/// Log density of `N(mean, cov)` through a fresh Cholesky factor.
fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let z = chol.l().solve_lower_triangular(&(x - mean)).unwrap();
    let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * (x.len() as f64 * (2.0 * PI).ln() + logdet + z.norm_squared())
}

/// Inducing-value surrogate in direct form: `u = L (m + L_f e)` with `L`
/// the Cholesky factor of the prior covariance at the inducing points.
struct DirectSurrogate {
    prior_cov: DMatrix<f64>,
    prior_l: DMatrix<f64>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    sample_factor: DMatrix<f64>,
}

impl DirectSurrogate {
    fn new(lf: &LatentFunction) -> Self {
        let z = lf.inducing.points();
        let prior_cov = gram(z, z, &lf.kernel);
        let prior_l = prior_cov.clone().cholesky().unwrap().l();
        let lf_mat = lf.variational.cov_factor.matrix();
        let mean = &prior_l * &lf.variational.mean;
        let sample_factor = &prior_l * &lf_mat;
        let cov = &sample_factor * sample_factor.transpose();
        Self {
            prior_cov,
            prior_l,
            mean,
            cov,
            sample_factor,
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> DVector<f64> {
        let e = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.sample_factor * e
    }
}

fn instance(seed: u64) -> (GlobalParams, PersonalParams, UnitDataset, PriorHypers) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let n = rng.random_range(1..=8);
    let l = rng.random_range(1..=3);
    let q = rng.random_range(1..=4);
    let d = rng.random_range(1..=2);
    let prior = PriorHypers {
        pi: rng.random_range(0.1..0.9),
        slab_variance: rng.random_range(0.5..2.0),
        num_latents: l,
        num_inducing: q,
    };
    (
        random_global(&mut rng, l, q, d),
        random_personal(&mut rng, l),
        random_data(&mut rng, 0, n, d),
        prior,
    )
}

pub fn expected_loglik_matches_monte_carlo() {
    for seed in 0..INSTANCES {
        let (g, p, data, _) = instance(seed);
        let exact = expected_loglik(&data, None, &g, &p).unwrap();

        let x = data.inputs();
        let y = data.outputs();
        let gamma = g.gamma();
        let sigma_w = p.sigma_w();
        let s2 = p.noise().powi(2);
        // per latent: surrogate, conditional mean map and conditional sd
        let parts: Vec<(DirectSurrogate, DMatrix<f64>, Vec<f64>)> = g
            .latents
            .iter()
            .map(|lf| {
                let s = DirectSurrogate::new(lf);
                let kxz = gram(x, lf.inducing.points(), &lf.kernel);
                let map = s
                    .prior_cov
                    .clone()
                    .cholesky()
                    .unwrap()
                    .solve(&kxz.transpose())
                    .transpose();
                let kxx = gram(x, x, &lf.kernel);
                let sd = (0..x.nrows())
                    .map(|i| (kxx[(i, i)] - map.row(i).dot(&kxz.row(i))).max(0.0).sqrt())
                    .collect();
                (s, map, sd)
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = (0..SAMPLES).map(|_| {
            let mut f = DVector::zeros(x.nrows());
            for (l, (s, map, sd)) in parts.iter().enumerate() {
                let on = rng.random::<f64>() < gamma[l];
                let w = p.mu_w[l] + sigma_w[l] * rng.sample::<f64, _>(StandardNormal);
                let u = s.draw(&mut rng);
                let cond = map * u;
                for i in 0..x.nrows() {
                    let fl = cond[i] + sd[i] * rng.sample::<f64, _>(StandardNormal);
                    if on {
                        f[i] += w * fl;
                    }
                }
            }
            (0..y.len()).map(|i| normal_logpdf(y[i], f[i], s2)).sum::<f64>()
        });
        within(exact, &estimate(draws), "expected_loglik", seed);
    }
}

pub fn spike_slab_kl_matches_monte_carlo() {
    for seed in 0..INSTANCES {
        let (g, p, _, prior) = instance(seed);
        let gamma = g.gamma();
        let exact = kl_spike_slab(&p, &gamma, &prior);
        let sigma_w = p.sigma_w();
        let sv = prior.slab_variance;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = (0..SAMPLES).map(|_| {
            let mut log_ratio = 0.0;
            for l in 0..gamma.len() {
                // off-state weights follow the prior slab, so they cancel
                if rng.random::<f64>() < gamma[l] {
                    let w = p.mu_w[l] + sigma_w[l] * rng.sample::<f64, _>(StandardNormal);
                    log_ratio += gamma[l].ln() + normal_logpdf(w, p.mu_w[l], sigma_w[l].powi(2))
                        - prior.pi.ln()
                        - normal_logpdf(w, 0.0, sv);
                } else {
                    log_ratio += (1.0 - gamma[l]).ln() - (1.0 - prior.pi).ln();
                }
            }
            log_ratio
        });
        within(exact, &estimate(draws), "kl_spike_slab", seed);
    }
}

pub fn latent_kl_matches_monte_carlo() {
    for seed in 0..INSTANCES {
        let (g, ..) = instance(seed);
        for (l, lf) in g.latents.iter().enumerate() {
            let exact = kl_latent(&lf.variational);
            let s = DirectSurrogate::new(lf);
            assert_eq!(s.prior_l.nrows(), lf.inducing.len());
            let zero = DVector::zeros(s.mean.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 10 + l as u64);
            let draws = (0..SAMPLES).map(|_| {
                let u = s.draw(&mut rng);
                mvn_logpdf(&u, &s.mean, &s.cov) - mvn_logpdf(&u, &zero, &s.prior_cov)
            });
            within(exact, &estimate(draws), "kl_latent", seed);
        }
    }
}
