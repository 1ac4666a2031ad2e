//! The per-unit variational objective and its analytic gradient.
//!
//! For unit `m` with coefficient moments `e_l = E[w_l a_l]`,
//! `v_l = E[(w_l a_l)^2]`, projected means `a_l = A_l mu_l` and per-point
//! traces `t_l = diag(K_l) + diag(A_l S_l A_l^T)`:
//!
//! ```text
//! E[log p(y|f)] = -N/2 log(2 pi s^2)
//!                 - 1/(2 s^2) [ |y - sum_l e_l a_l|^2
//!                               + sum_l (v_l - e_l^2) |a_l|^2
//!                               + sum_l v_l sum_n t_l,n ]
//! V_m = E[log p(y|f)] - KL_coeff - r_m sum_l KL(q(u_l) | p(u_l))
//! ```
//!
//! Every data-dependent term is a sum over points, so a minibatch estimate
//! scales those sums by `N / |batch|`.
//!
//! The inducing surrogate is stored whitened: `u_l = L_z v_l` with
//! `L_z L_z^T = C_zz` and `v_l ~ N(m_l, L_f L_f^T)`. Then `A_l mu_l = B_l m_l`
//! with `B_l = C_xz L_z^{-T}` and the latent KL is taken against `N(0, I)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Whitened};
use crate::params::{
    GlobalParams, GlobalShape, LatentVariational, PersonalParams, PriorHypers, UnitDataset,
};

/// Inclusion probabilities are clamped to `[GAMMA_CLAMP, 1 - GAMMA_CLAMP]`
/// inside logarithms.
pub const GAMMA_CLAMP: f64 = 1e-12;

/// Logit used to pin inclusion probabilities at one for the dense model;
/// `sigmoid(40.0) == 1.0` in double precision.
pub const PINNED_GAMMA_LOGIT: f64 = 40.0;

/// Which objective a unit optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Spike-and-slab coefficients with learned inclusion probabilities.
    #[default]
    SpikeSlab,
    /// Plain federated LMC: inclusion pinned at one, no coefficient KL.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMoments {
    /// `e_l = gamma_l * mu_l`
    pub first: Vec<f64>,
    /// `v_l = gamma_l * (mu_l^2 + sigma_l^2)`
    pub second: Vec<f64>,
}

pub fn coeff_moments(personal: &PersonalParams, gamma: &[f64]) -> CoefficientMoments {
    let sigma = personal.sigma_w();
    let first = personal
        .mu_w
        .iter()
        .zip(gamma)
        .map(|(mu, g)| g * mu)
        .collect();
    let second = personal
        .mu_w
        .iter()
        .zip(&sigma)
        .zip(gamma)
        .map(|((mu, s), g)| g * (mu * mu + s * s))
        .collect();
    CoefficientMoments { first, second }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub expected_loglik: f64,
    pub kl_coeff: f64,
    pub kl_latent_weighted: f64,
    pub total: f64,
}

/// Gradient of `V_m` with respect to the flat unconstrained vectors.
#[derive(Debug, Clone)]
pub struct UnitGradient {
    pub global: Vec<f64>,
    pub personal: Vec<f64>,
    pub value: ElboBreakdown,
}

impl UnitGradient {
    pub fn is_finite(&self) -> bool {
        self.global.iter().chain(&self.personal).all(|g| g.is_finite())
            && self.value.total.is_finite()
    }
}

/// Per-latent quantities shared by the forward pass and the gradient.
struct LatentPass {
    proj: Whitened,
    /// Clean lower factor of `C_zz + jitter I`.
    lz: DMatrix<f64>,
    factor: DMatrix<f64>,
    a_mean: DVector<f64>,
    a_factor: DMatrix<f64>,
    trace_sum: f64,
    norm2: f64,
}

fn latent_pass(x: &DMatrix<f64>, g: &GlobalParams, l: usize) -> Result<LatentPass> {
    let lf = &g.latents[l];
    let proj = kernels::whiten(x, &lf.inducing, &lf.kernel)?;
    let factor = lf.variational.cov_factor.matrix();
    let a_mean = &proj.b * &lf.variational.mean;
    let a_factor = &proj.b * &factor;
    let trace_sum = proj.residual_diag.sum() + a_factor.norm_squared();
    let norm2 = a_mean.norm_squared();
    Ok(LatentPass {
        lz: proj.chol.l(),
        proj,
        factor,
        a_mean,
        a_factor,
        trace_sum,
        norm2,
    })
}

/// Closed-form expected log-likelihood of the selected rows (all rows when
/// `batch` is `None`), scaled up to the full dataset size.
pub fn expected_loglik(
    data: &UnitDataset,
    batch: Option<&[usize]>,
    global: &GlobalParams,
    personal: &PersonalParams,
) -> Result<f64> {
    let rows = Rows::new(data, batch);
    let passes = (0..global.num_latents())
        .map(|l| latent_pass(&rows.x, global, l))
        .collect::<Result<Vec<_>>>()?;
    let mom = coeff_moments(personal, &global.gamma());
    Ok(loglik_from_passes(&rows, &passes, &mom, personal).0)
}

struct Rows {
    x: DMatrix<f64>,
    y: DVector<f64>,
    scale: f64,
}

impl Rows {
    fn new(data: &UnitDataset, batch: Option<&[usize]>) -> Self {
        match batch {
            Some(idx) if idx.len() < data.len() => {
                let (x, y) = data.subset(idx);
                Self {
                    x,
                    y,
                    scale: data.len() as f64 / idx.len() as f64,
                }
            }
            _ => Self {
                x: data.inputs().clone(),
                y: data.outputs().clone(),
                scale: 1.0,
            },
        }
    }
}

/// Returns `(value, bracket, residual)` where `bracket` is the squared-error
/// term divided out of the likelihood and `residual = y - sum_l e_l a_l`.
fn loglik_from_passes(
    rows: &Rows,
    passes: &[LatentPass],
    mom: &CoefficientMoments,
    personal: &PersonalParams,
) -> (f64, f64, DVector<f64>) {
    let b = rows.y.len() as f64;
    let mut resid = rows.y.clone();
    for (p, e) in passes.iter().zip(&mom.first) {
        resid.axpy(-e, &p.a_mean, 1.0);
    }
    let mut bracket = resid.norm_squared();
    for ((p, e), v) in passes.iter().zip(&mom.first).zip(&mom.second) {
        bracket += (v - e * e) * p.norm2 + v * p.trace_sum;
    }
    let s2 = (2.0 * personal.log_noise).exp();
    let value =
        rows.scale * (-0.5 * b * (2.0 * PI).ln() - b * personal.log_noise - 0.5 * bracket / s2);
    (value, bracket, resid)
}

/// `KL(q(u) || p(u))` for one latent. In whitened coordinates the prior is
/// standard normal, so the kernel drops out.
pub fn kl_latent(q: &LatentVariational) -> f64 {
    let n = q.mean.len() as f64;
    let trace = q.cov_factor.matrix().norm_squared();
    let log_det_s: f64 = 2.0 * q.cov_factor.log_diag().iter().sum::<f64>();
    0.5 * (trace + q.mean.norm_squared() - n - log_det_s)
}

/// Divergence of one unit's coefficient surrogate from the spike-and-slab prior.
pub fn kl_spike_slab(personal: &PersonalParams, gamma: &[f64], prior: &PriorHypers) -> f64 {
    let slab_var = prior.slab_variance;
    let sigma = personal.sigma_w();
    let mut total = 0.0;
    for l in 0..gamma.len() {
        let g = gamma[l];
        let gc = g.clamp(GAMMA_CLAMP, 1.0 - GAMMA_CLAMP);
        let gauss = gaussian_kl(personal.mu_w[l], sigma[l], slab_var);
        total += g * ((gc / prior.pi).ln() + gauss)
            + (1.0 - g) * ((1.0 - gc) / (1.0 - prior.pi)).ln();
    }
    total
}

fn gaussian_kl(mu: f64, sigma: f64, slab_var: f64) -> f64 {
    0.5 * slab_var.ln() - sigma.ln() + (sigma * sigma + mu * mu) / (2.0 * slab_var) - 0.5
}

/// One unit's slice of the federated objective.
#[derive(Debug, Clone, Copy)]
pub struct UnitProblem<'a> {
    pub data: &'a UnitDataset,
    pub prior: &'a PriorHypers,
    pub kind: ModelKind,
    /// `N_m / sum_m N_m`
    pub weight: f64,
}

impl<'a> UnitProblem<'a> {
    pub fn new(
        data: &'a UnitDataset,
        prior: &'a PriorHypers,
        kind: ModelKind,
        weight: f64,
    ) -> Result<Self> {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "unit weight must lie in (0,1], got {weight}"
            )));
        }
        Ok(Self {
            data,
            prior,
            kind,
            weight,
        })
    }

    fn check(&self, global: &GlobalParams, personal: &PersonalParams) -> Result<()> {
        if personal.num_latents() != global.num_latents() {
            return Err(Error::DimensionMismatch {
                expected: global.num_latents(),
                actual: personal.num_latents(),
            });
        }
        if global.shape().dim != self.data.dim() {
            return Err(Error::DimensionMismatch {
                expected: global.shape().dim,
                actual: self.data.dim(),
            });
        }
        Ok(())
    }

    pub fn objective(
        &self,
        global: &GlobalParams,
        personal: &PersonalParams,
    ) -> Result<ElboBreakdown> {
        self.check(global, personal)?;
        let rows = Rows::new(self.data, None);
        let passes = (0..global.num_latents())
            .map(|l| latent_pass(&rows.x, global, l))
            .collect::<Result<Vec<_>>>()?;
        let gamma = global.gamma();
        let mom = coeff_moments(personal, &gamma);
        let (ell, _, _) = loglik_from_passes(&rows, &passes, &mom, personal);
        let kl_coeff = match self.kind {
            ModelKind::SpikeSlab => kl_spike_slab(personal, &gamma, self.prior),
            ModelKind::Dense => 0.0,
        };
        let kl_lat: f64 = global.latents.iter().map(|lf| kl_latent(&lf.variational)).sum();
        let kl_latent_weighted = self.weight * kl_lat;
        Ok(ElboBreakdown {
            expected_loglik: ell,
            kl_coeff,
            kl_latent_weighted,
            total: ell - kl_coeff - kl_latent_weighted,
        })
    }

    /// Analytic gradient of `V_m` (or of its minibatch estimate) with respect
    /// to every unconstrained global and personal coordinate.
    pub fn gradient(
        &self,
        global: &GlobalParams,
        personal: &PersonalParams,
        batch: Option<&[usize]>,
    ) -> Result<UnitGradient> {
        self.check(global, personal)?;
        let shape: GlobalShape = global.shape();
        let nl = shape.latents;
        let q = shape.inducing;
        let rows = Rows::new(self.data, batch);
        let passes = (0..nl)
            .map(|l| latent_pass(&rows.x, global, l))
            .collect::<Result<Vec<_>>>()?;
        let gamma = global.gamma();
        let mom = coeff_moments(personal, &gamma);
        let (ell, bracket, resid) = loglik_from_passes(&rows, &passes, &mom, personal);

        let s2 = (2.0 * personal.log_noise).exp();
        let b = rows.y.len() as f64;
        // d ELL / d bracket
        let c = -0.5 * rows.scale / s2;

        let mut g_global = vec![0.0; shape.len()];
        let mut g_personal = vec![0.0; PersonalParams::flat_len(nl)];
        let sigma_w = personal.sigma_w();

        g_personal[2 * nl] = rows.scale * (-b + bracket / s2);

        let mut kl_lat = 0.0;
        for l in 0..nl {
            let p = &passes[l];
            let lf = &global.latents[l];
            let (e, v) = (mom.first[l], mom.second[l]);
            let (mu_w, sw, gm) = (personal.mu_w[l], sigma_w[l], gamma[l]);

            // bracket sensitivities to the coefficient moments
            let d_e = -2.0 * p.a_mean.dot(&resid) - 2.0 * e * p.norm2;
            let d_v = p.norm2 + p.trace_sum;
            g_personal[l] = c * (d_e * gm + d_v * 2.0 * gm * mu_w);
            g_personal[nl + l] = c * d_v * 2.0 * gm * sw * sw;
            let d_gamma = c * (d_e * mu_w + d_v * (mu_w * mu_w + sw * sw));
            g_global[shape.gamma_offset() + l] = d_gamma * gm * (1.0 - gm);

            // bracket sensitivities to a_l = B m, and to B itself
            let mut d_amean = resid.clone() * (-2.0 * e);
            d_amean.axpy(2.0 * (v - e * e), &p.a_mean, 1.0);
            let m = &lf.variational.mean;
            let d_m = p.proj.b.transpose() * &d_amean;
            // d |B L_f|^2 / d L_f = 2 B^T B L_f
            let d_factor_ell = p.proj.b.transpose() * &p.a_factor * (2.0 * v);
            let mut d_b = &d_amean * m.transpose();
            d_b += &p.a_factor * p.factor.transpose() * (2.0 * v);
            let mut active = 0usize;
            for n in 0..d_b.nrows() {
                if !p.proj.clamped[n] {
                    active += 1;
                    for k in 0..q {
                        d_b[(n, k)] -= 2.0 * v * p.proj.b[(n, k)];
                    }
                }
            }

            // chain B = C L_z^{-T} and L_z = chol(C_zz)
            let chol = &p.proj.chol;
            let d_cross = chol.right_solve_l(&d_b);
            let d_lz = -(d_cross.transpose() * &p.proj.b);
            let d_kzz = kernels::cholesky_backprop(&p.lz, chol, &d_lz);

            let kl = kl_latent(&lf.variational);
            kl_lat += kl;

            let r = self.weight;
            let off = shape.latent_offset(l);
            for i in 0..q {
                g_global[off + i] = c * d_m[i] - r * m[i];
            }
            let f_off = off + shape.factor_offset();
            let mut k = 0;
            for i in 0..q {
                let lii = p.factor[(i, i)];
                let d_ell = c * d_factor_ell[(i, i)];
                let d_kl = lii - 1.0 / lii;
                g_global[f_off + i] = (d_ell - r * d_kl) * lii;
                for j in 0..i {
                    let d_ell = c * d_factor_ell[(i, j)];
                    let d_kl = p.factor[(i, j)];
                    g_global[f_off + q + k] = d_ell - r * d_kl;
                    k += 1;
                }
            }

            let kzz = kernels::cov_symmetric(lf.inducing.points(), &lf.kernel);
            let kg = kernels::backprop_kernel(
                &rows.x,
                &lf.inducing,
                &lf.kernel,
                &p.proj.cross,
                &(d_cross * c),
                &kzz,
                &(d_kzz * c),
                c * v * active as f64,
            );
            let k_off = off + shape.kernel_offset();
            g_global[k_off] = kg.log_variance;
            g_global[k_off + 1] = kg.log_lengthscale;
            let z_off = off + shape.inducing_offset();
            for i in 0..q {
                for d in 0..shape.dim {
                    g_global[z_off + i * shape.dim + d] = kg.inducing[(i, d)];
                }
            }
        }

        let kl_coeff = match self.kind {
            ModelKind::SpikeSlab => {
                self.spike_slab_gradient(personal, &gamma, &mut g_global, &mut g_personal, shape);
                kl_spike_slab(personal, &gamma, self.prior)
            }
            ModelKind::Dense => 0.0,
        };

        let kl_latent_weighted = self.weight * kl_lat;
        Ok(UnitGradient {
            global: g_global,
            personal: g_personal,
            value: ElboBreakdown {
                expected_loglik: ell,
                kl_coeff,
                kl_latent_weighted,
                total: ell - kl_coeff - kl_latent_weighted,
            },
        })
    }

    /// Subtracts the coefficient-KL gradient in place.
    fn spike_slab_gradient(
        &self,
        personal: &PersonalParams,
        gamma: &[f64],
        g_global: &mut [f64],
        g_personal: &mut [f64],
        shape: GlobalShape,
    ) {
        let nl = gamma.len();
        let slab_var = self.prior.slab_variance;
        let pi = self.prior.pi;
        let sigma = personal.sigma_w();
        for l in 0..nl {
            let g = gamma[l];
            let gc = g.clamp(GAMMA_CLAMP, 1.0 - GAMMA_CLAMP);
            let (mu, s) = (personal.mu_w[l], sigma[l]);
            let gauss = gaussian_kl(mu, s, slab_var);
            let d_gamma = (gc / pi).ln() - ((1.0 - gc) / (1.0 - pi)).ln() + gauss;
            g_global[shape.gamma_offset() + l] -= d_gamma * g * (1.0 - g);
            g_personal[l] -= g * mu / slab_var;
            g_personal[nl + l] -= g * (-1.0 + s * s / slab_var);
        }
    }
}

/// Draws a batch of `size` distinct row indices uniformly at random; `None`
/// when the batch would cover the whole dataset.
pub fn sample_batch(
    n: usize,
    size: Option<usize>,
    rng: &mut impl rand::Rng,
) -> Option<Vec<usize>> {
    match size {
        Some(b) if b < n => Some(rand::seq::index::sample(rng, n, b).into_vec()),
        _ => None,
    }
}
