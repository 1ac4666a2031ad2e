//! Predictive moments, latent selection, onboarding of new units, and the
//! independent exact-GP baseline.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, KernelParams};
use crate::optim::{Adam, AdamConfig};
use crate::params::{GlobalParams, PersonalParams, UnitDataset};

pub const DEFAULT_GAMMA_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ENERGY_THRESHOLD: f64 = 1e-10;

/// Marginal predictive mean and variance per test point.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMoments {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

impl PredictiveMoments {
    /// `x1..xd,mean,variance[,y_true]` rows, one per test point.
    pub fn write_csv(&self, x: &DMatrix<f64>, truth: Option<&DVector<f64>>, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = x.ncols();
        let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        header.extend(["mean".to_string(), "variance".to_string()]);
        if truth.is_some() {
            header.push("y_true".into());
        }
        w.write_record(&header).map_err(csv_error)?;
        for i in 0..x.nrows() {
            let mut row: Vec<String> = (0..d).map(|k| x[(i, k)].to_string()).collect();
            row.push(self.mean[i].to_string());
            row.push(self.variance[i].to_string());
            if let Some(t) = truth {
                row.push(t[i].to_string());
            }
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn mse(&self, truth: &DVector<f64>) -> f64 {
        assert_eq!(truth.len(), self.mean.len());
        if truth.is_empty() {
            return 0.0;
        }
        (&self.mean - truth).norm_squared() / truth.len() as f64
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// How the Monte-Carlo draws are turned into a variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceEstimator {
    /// Mean conditional variance plus the spread of the conditional means.
    #[default]
    TotalVariance,
    /// `1/S^2 * sum_s sum_l (w a)^2 diag(K* + A* S A*^T) + s^2`. Shrinks with `S`;
    /// kept for comparison only.
    Literal,
}

/// Projected mean `A* mu_l` and per-point trace `diag(K* + A* S_l A*^T)`.
fn latent_moments(global: &GlobalParams, x: &DMatrix<f64>) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    global
        .latents
        .iter()
        .map(|lf| {
            let w = kernels::whiten(x, &lf.inducing, &lf.kernel)?;
            let mean = &w.b * &lf.variational.mean;
            let bf = &w.b * lf.variational.cov_factor.matrix();
            let trace = DVector::from_fn(x.nrows(), |n, _| {
                w.residual_diag[n] + bf.row(n).norm_squared()
            });
            Ok((mean, trace))
        })
        .collect()
}

/// Monte-Carlo predictive moments for a trained unit at `x_star`.
pub fn mc_predict(
    global: &GlobalParams,
    personal: &PersonalParams,
    x_star: &DMatrix<f64>,
    samples: usize,
    seed: u64,
    estimator: VarianceEstimator,
) -> Result<PredictiveMoments> {
    if samples == 0 {
        return Err(Error::InvalidConfig("need at least one Monte-Carlo sample".into()));
    }
    if personal.num_latents() != global.num_latents() {
        return Err(Error::DimensionMismatch {
            expected: global.num_latents(),
            actual: personal.num_latents(),
        });
    }
    let n = x_star.nrows();
    let moments = latent_moments(global, x_star)?;
    let gamma = global.gamma();
    let sigma_w = personal.sigma_w();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut sum_mean = DVector::zeros(n);
    let mut sum_mean_sq = DVector::zeros(n);
    let mut sum_cond_var = DVector::zeros(n);
    let mut coeff = vec![0.0; moments.len()];
    for _ in 0..samples {
        for l in 0..moments.len() {
            let on = rng.random::<f64>() < gamma[l];
            let w = personal.mu_w[l] + sigma_w[l] * rng.sample::<f64, _>(StandardNormal);
            coeff[l] = if on { w } else { 0.0 };
        }
        let mut mean_s = DVector::zeros(n);
        for (c, (m, t)) in coeff.iter().zip(&moments) {
            if *c != 0.0 {
                mean_s.axpy(*c, m, 1.0);
                sum_cond_var.axpy(c * c, t, 1.0);
            }
        }
        sum_mean_sq += mean_s.component_mul(&mean_s);
        sum_mean += mean_s;
    }
    let s = samples as f64;
    let noise = personal.noise().powi(2);
    let mean = &sum_mean / s;
    let variance = match estimator {
        VarianceEstimator::TotalVariance => DVector::from_fn(n, |i, _| {
            let spread = (sum_mean_sq[i] / s - mean[i] * mean[i]).max(0.0);
            sum_cond_var[i] / s + spread + noise
        }),
        VarianceEstimator::Literal => sum_cond_var.map(|v| v / (s * s) + noise),
    };
    Ok(PredictiveMoments { mean, variance })
}

/// Outcome of latent selection with the diagnostics behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<usize>,
    pub gamma: Vec<f64>,
    /// `sum_m (gamma_l mu_{w,m,l})^2`
    pub coeff_energy: Vec<f64>,
    /// Set when nothing was selected.
    pub empty: bool,
}

impl SelectionResult {
    pub fn count(&self) -> usize {
        self.selected.len()
    }

    /// `latent,gamma,energy,selected` rows.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["latent", "gamma", "energy", "selected"]).map_err(csv_error)?;
        for l in 0..self.gamma.len() {
            w.write_record([
                l.to_string(),
                self.gamma[l].to_string(),
                self.coeff_energy[l].to_string(),
                self.selected.contains(&l).to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// The `k` latents with the largest coefficient energy, ascending by index.
    pub fn top_by_energy(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.coeff_energy.len()).collect();
        idx.sort_by(|&a, &b| self.coeff_energy[b].total_cmp(&self.coeff_energy[a]).then(a.cmp(&b)));
        let mut top: Vec<usize> = idx.into_iter().take(k).collect();
        top.sort_unstable();
        top
    }
}

pub fn select_latents(
    global: &GlobalParams,
    personal: &[PersonalParams],
    gamma_threshold: f64,
    energy_threshold: f64,
) -> SelectionResult {
    let gamma = global.gamma();
    let coeff_energy: Vec<f64> = (0..gamma.len())
        .map(|l| {
            personal
                .iter()
                .map(|p| (gamma[l] * p.mu_w[l]).powi(2))
                .sum()
        })
        .collect();
    let selected: Vec<usize> = (0..gamma.len())
        .filter(|&l| gamma[l] > gamma_threshold && coeff_energy[l] > energy_threshold)
        .collect();
    let empty = selected.is_empty();
    if empty {
        log::warn!("no latent function passed the selection thresholds");
    }
    SelectionResult {
        selected,
        gamma,
        coeff_energy,
        empty,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewUnitConfig {
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for NewUnitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            adam: AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
        }
    }
}

/// Deterministic coefficients and noise level fitted for a new unit.
#[derive(Debug, Clone, PartialEq)]
pub struct NewUnitFit {
    pub w: Vec<f64>,
    pub log_noise: f64,
    pub steps: usize,
    pub seconds: f64,
}

impl NewUnitFit {
    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn seconds_per_step(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.seconds / self.steps as f64
        }
    }
}

/// Expected log-likelihood of a new unit with fixed coefficients `w`, given
/// the projected means `a_l` and summed traces `T_l` of the frozen latents.
fn new_unit_objective(
    y: &DVector<f64>,
    a: &[DVector<f64>],
    traces: &[f64],
    w: &[f64],
    log_noise: f64,
) -> (f64, Vec<f64>, f64) {
    let n = y.len() as f64;
    let mut resid = y.clone();
    for (al, wl) in a.iter().zip(w) {
        resid.axpy(-wl, al, 1.0);
    }
    let mut bracket = resid.norm_squared();
    for (t, wl) in traces.iter().zip(w) {
        bracket += wl * wl * t;
    }
    let s2 = (2.0 * log_noise).exp();
    let value = -0.5 * n * (2.0 * std::f64::consts::PI).ln() - n * log_noise - 0.5 * bracket / s2;
    let grad_w = a
        .iter()
        .zip(traces)
        .zip(w)
        .map(|((al, t), wl)| (al.dot(&resid) - wl * t) / s2)
        .collect();
    let grad_noise = -n + bracket / s2;
    (value, grad_w, grad_noise)
}

/// Fits coefficients and noise for a unit that did not take part in
/// training. `global` is read only; pass it already restricted to the
/// selected latents.
pub fn new_unit_fit(global: &GlobalParams, data: &UnitDataset, cfg: &NewUnitConfig) -> Result<NewUnitFit> {
    let started = Instant::now();
    let moments = latent_moments(global, data.inputs())?;
    let a: Vec<DVector<f64>> = moments.iter().map(|(m, _)| m.clone()).collect();
    let traces: Vec<f64> = moments.iter().map(|(_, t)| t.sum()).collect();
    let y = data.outputs();
    let nl = a.len();

    let spread = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
    let mut flat = vec![0.0; nl + 1];
    flat[nl] = (spread / 2.0).max(crate::fedrun::unit::NOISE_FLOOR).ln();
    let mut adam = Adam::new(nl + 1);
    let mut grad = vec![0.0; nl + 1];
    for _ in 0..cfg.steps {
        let (value, gw, gn) = new_unit_objective(y, &a, &traces, &flat[..nl], flat[nl]);
        if !value.is_finite() || gw.iter().any(|g| !g.is_finite()) || !gn.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        grad[..nl].copy_from_slice(&gw);
        grad[nl] = gn;
        adam.ascend(&cfg.adam, &mut flat, &grad);
    }
    Ok(NewUnitFit {
        w: flat[..nl].to_vec(),
        log_noise: flat[nl],
        steps: cfg.steps,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Predictive moments of a fitted new unit; no sampling is needed because
/// the coefficients are point estimates.
pub fn new_unit_predict(
    global: &GlobalParams,
    w: &[f64],
    log_noise: f64,
    x_star: &DMatrix<f64>,
) -> Result<PredictiveMoments> {
    if w.len() != global.num_latents() {
        return Err(Error::DimensionMismatch {
            expected: global.num_latents(),
            actual: w.len(),
        });
    }
    let n = x_star.nrows();
    let mut mean = DVector::zeros(n);
    let mut variance = DVector::from_element(n, (2.0 * log_noise).exp());
    for ((m, t), wl) in latent_moments(global, x_star)?.iter().zip(w) {
        mean.axpy(*wl, m, 1.0);
        variance.axpy(wl * wl, t, 1.0);
    }
    Ok(PredictiveMoments { mean, variance })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IgpConfig {
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for IgpConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            adam: AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
        }
    }
}

/// Hyperparameters of a fitted exact GP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IgpFit {
    pub kernel: KernelParams,
    pub log_noise: f64,
    pub log_marginal: f64,
}

/// Exact log marginal likelihood and its gradient with respect to
/// `(log variance, log length-scale, log noise)`.
pub fn igp_log_marginal(data: &UnitDataset, kernel: &KernelParams, log_noise: f64) -> Result<(f64, [f64; 3])> {
    let x = data.inputs();
    let y = data.outputs();
    let n = y.len();
    let kf = kernels::cov_symmetric(x, kernel);
    let s2 = (2.0 * log_noise).exp();
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += s2;
    }
    let chol = kernels::chol_jittered(&k, kernels::default_jitter(&k))?;
    let alpha = chol.solve_vec(y);
    let value = -0.5 * y.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    // 1/2 tr((alpha alpha^T - K^-1) dK)
    let w = &alpha * alpha.transpose() - chol.solve(&DMatrix::identity(n, n));
    let inv_ell2 = 1.0 / kernel.lengthscale().powi(2);
    let mut g = [0.0; 3];
    for i in 0..n {
        for j in 0..n {
            let kij = kf[(i, j)];
            g[0] += w[(i, j)] * kij;
            let r2: f64 = (0..x.ncols()).map(|c| (x[(i, c)] - x[(j, c)]).powi(2)).sum();
            g[1] += w[(i, j)] * kij * r2 * inv_ell2;
        }
        g[2] += w[(i, i)] * 2.0 * s2;
    }
    Ok((value, g.map(|v| 0.5 * v)))
}

/// Fits an exact GP to one unit by Adam ascent on the log marginal
/// likelihood, then predicts at `x_star`.
pub fn igp_fit_predict(
    data: &UnitDataset,
    x_star: &DMatrix<f64>,
    cfg: &IgpConfig,
) -> Result<(PredictiveMoments, IgpFit)> {
    if data.len() < 2 {
        return Err(Error::InvalidDataset("exact GP baseline needs at least two points".into()));
    }
    let y = data.outputs();
    let x = data.inputs();
    let var = (y.norm_squared() / y.len() as f64).max(1e-6);
    let range = (0..x.ncols())
        .map(|c| x.column(c).max() - x.column(c).min())
        .fold(0.0, f64::max)
        .max(1e-3);
    let mut flat = [var.ln(), (range / 10.0).ln(), (var.sqrt() / 2.0).ln()];
    let mut adam = Adam::new(3);
    for _ in 0..cfg.steps {
        let kernel = KernelParams {
            log_variance: flat[0],
            log_lengthscale: flat[1],
        };
        let (_, g) = igp_log_marginal(data, &kernel, flat[2])?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        adam.ascend(&cfg.adam, &mut flat, &g);
    }
    let kernel = KernelParams {
        log_variance: flat[0],
        log_lengthscale: flat[1],
    };
    let (log_marginal, _) = igp_log_marginal(data, &kernel, flat[2])?;
    let fit = IgpFit {
        kernel,
        log_noise: flat[2],
        log_marginal,
    };
    Ok((igp_predict(data, &fit, x_star)?, fit))
}

/// Standard conditional-Gaussian prediction of a fitted exact GP.
pub fn igp_predict(data: &UnitDataset, fit: &IgpFit, x_star: &DMatrix<f64>) -> Result<PredictiveMoments> {
    let x = data.inputs();
    let n = x.nrows();
    let s2 = (2.0 * fit.log_noise).exp();
    let mut k = kernels::cov_symmetric(x, &fit.kernel);
    for i in 0..n {
        k[(i, i)] += s2;
    }
    let chol = kernels::chol_jittered(&k, kernels::default_jitter(&k))?;
    let ks = kernels::cov_matrix(x_star, x, &fit.kernel);
    let mean = &ks * chol.solve_vec(data.outputs());
    let v = chol.solve_lower(&ks.transpose());
    let prior_var = fit.kernel.variance();
    let variance = DVector::from_fn(x_star.nrows(), |i, _| {
        (prior_var - v.column(i).norm_squared()).max(0.0) + s2
    });
    Ok(PredictiveMoments { mean, variance })
}
