#![allow(dead_code)]

pub mod oracles;
pub mod gradients;
pub mod federation;
pub mod privacy;
pub mod sweep;

use fedmgp::kernels::{InducingSet, KernelParams};
use fedmgp::params::{GlobalParams, LatentFunction, LatentVariational, PersonalParams, TriFactor, UnitDataset};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn random_global(rng: &mut impl Rng, latents: usize, q: usize, d: usize) -> GlobalParams {
    let lat = (0..latents)
        .map(|_| {
            let z = DMatrix::from_fn(q, d, |i, k| {
                i as f64 * 0.8 - 1.2 + 0.15 * k as f64 + rng.random_range(-0.1..0.1)
            });
            LatentFunction {
                variational: LatentVariational {
                    mean: DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0)),
                    cov_factor: TriFactor::from_parts(
                        (0..q).map(|_| rng.random_range(-1.2..0.0)).collect(),
                        (0..TriFactor::strict_len(q)).map(|_| rng.random_range(-0.3..0.3)).collect(),
                    )
                    .unwrap(),
                },
                kernel: KernelParams {
                    log_variance: rng.random_range(-0.5..0.5),
                    log_lengthscale: rng.random_range(-0.3..0.5),
                },
                inducing: InducingSet::new(z).unwrap(),
            }
        })
        .collect();
    GlobalParams::new(lat, (0..latents).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

pub fn random_personal(rng: &mut impl Rng, latents: usize) -> PersonalParams {
    PersonalParams {
        mu_w: (0..latents).map(|_| rng.random_range(-1.5..1.5)).collect(),
        log_sigma_w: (0..latents).map(|_| rng.random_range(-1.5..0.0)).collect(),
        log_noise: rng.random_range(-1.0..0.0),
    }
}

pub fn random_data(rng: &mut impl Rng, unit_id: u32, n: usize, d: usize) -> UnitDataset {
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let y = DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5));
    UnitDataset::new(unit_id, x, y).unwrap()
}

/// Squared-exponential kernel written out independently of the library.
pub fn se(x: &[f64], x2: &[f64], k: &KernelParams) -> f64 {
    let r2: f64 = x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    k.log_variance.exp() * (-0.5 * r2 / (2.0 * k.log_lengthscale).exp()).exp()
}

pub fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>, k: &KernelParams) -> DMatrix<f64> {
    let row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<f64>>();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| se(&row(a, i), &row(b, j), k))
}

/// Curves sharing one smooth basis so that a federation has something to learn.
pub fn toy_units(m: usize, n: usize) -> Vec<UnitDataset> {
    (0..m)
        .map(|u| {
            let xs: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|x| (1.0 + 0.3 * u as f64) * x.sin() + 0.2 * (u as f64 - 1.0) * (2.0 * x).cos())
                .collect();
            UnitDataset::from_1d(u as u32, &xs, &ys).unwrap()
        })
        .collect()
}
