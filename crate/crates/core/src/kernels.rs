//! RBF kernel evaluation, covariance assembly and the inducing-point
//! projections `A = C_xz C_zz^{-1}`, `K = C_xx - A C_zx`.
//!
//! Every factorization goes through [`chol_jittered`], which escalates a
//! diagonal jitter until the Cholesky succeeds. Inverses are never formed;
//! all solves are triangular.

use std::cell::Cell;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Number of jitter escalation levels tried after the zero-jitter attempt.
pub const JITTER_LEVELS: i32 = 7;

/// Relative jitter used when callers do not supply one: `1e-6 * mean(diag)`.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-6;

/// Full residual covariances are only materialized up to this many rows.
pub const FULL_RESIDUAL_LIMIT: usize = 512;

thread_local! {
    static JITTER_EVENTS: Cell<u64> = const { Cell::new(0) };
}

/// Number of factorizations on the current thread that needed a non-zero jitter.
pub fn jitter_events() -> u64 {
    JITTER_EVENTS.with(|c| c.get())
}

/// Squared-exponential kernel hyperparameters, stored in log space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub log_variance: f64,
    pub log_lengthscale: f64,
}

impl KernelParams {
    pub fn new(variance: f64, lengthscale: f64) -> Self {
        Self {
            log_variance: variance.ln(),
            log_lengthscale: lengthscale.ln(),
        }
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn is_valid(&self) -> bool {
        let (v, l) = (self.variance(), self.lengthscale());
        v.is_finite() && v > 0.0 && l.is_finite() && l > 0.0
    }
}

/// Inducing input locations, one row per inducing point.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    points: DMatrix<f64>,
}

impl InducingSet {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::ShapeMismatch(
                "inducing set needs at least one point and one input dimension".into(),
            ));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("inducing points must be finite".into()));
        }
        for i in 0..points.nrows() {
            for j in 0..i {
                let dist2: f64 = (0..points.ncols())
                    .map(|k| (points[(i, k)] - points[(j, k)]).powi(2))
                    .sum();
                if dist2.sqrt() <= 1e-9 {
                    return Err(Error::ShapeMismatch(format!(
                        "inducing points {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(Self { points })
    }

    /// Builds a set without the distinctness check. Used when decoding
    /// payloads whose validity was established by the sender.
    pub(crate) fn from_raw(points: DMatrix<f64>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

fn sq_dist_rows(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.ncols() {
        let d = a[(i, k)] - b[(j, k)];
        acc += d * d;
    }
    acc
}

pub fn rbf_eval(x: &[f64], x2: &[f64], params: &KernelParams) -> f64 {
    debug_assert_eq!(x.len(), x2.len());
    let dist2: f64 = x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    let ell = params.lengthscale();
    params.variance() * (-dist2 / (2.0 * ell * ell)).exp()
}

/// Covariance between the rows of `x` and the rows of `x2`.
pub fn cov_matrix(x: &DMatrix<f64>, x2: &DMatrix<f64>, params: &KernelParams) -> DMatrix<f64> {
    debug_assert_eq!(x.ncols(), x2.ncols());
    let var = params.variance();
    let inv_two_ell2 = 1.0 / (2.0 * params.lengthscale().powi(2));
    DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
        var * (-sq_dist_rows(x, i, x2, j) * inv_two_ell2).exp()
    })
}

/// Symmetric covariance of `x` with itself; filled from the upper triangle
/// so the result is exactly symmetric.
pub fn cov_symmetric(x: &DMatrix<f64>, params: &KernelParams) -> DMatrix<f64> {
    let n = x.nrows();
    let var = params.variance();
    let inv_two_ell2 = 1.0 / (2.0 * params.lengthscale().powi(2));
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = var;
        for j in (i + 1)..n {
            let v = var * (-sq_dist_rows(x, i, x, j) * inv_two_ell2).exp();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// A Cholesky factor of `K + jitter * I`.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl JitteredCholesky {
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn l_dirty(&self) -> &DMatrix<f64> {
        self.chol.l_dirty()
    }

    /// Solves `(K + jitter I) X = b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Solves `L^T X = b`.
    pub fn solve_upper_t(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        back_substitute_t(self.chol.l_dirty(), &mut x);
        x
    }

    /// Solves `L x = b` for the lower factor only.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        forward_substitute(self.chol.l_dirty(), &mut x);
        x
    }

    /// Solves `X L^T = c` for `X`, one length-`n` column update at a time.
    pub fn right_solve_lt(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.chol.l_dirty();
        let (n, q) = (c.nrows(), l.nrows());
        debug_assert_eq!(c.ncols(), q);
        let mut x = c.clone();
        let xs = x.as_mut_slice();
        for k in 0..q {
            let (done, rest) = xs.split_at_mut(k * n);
            let col = &mut rest[..n];
            for i in 0..k {
                axpy(-l[(k, i)], &done[i * n..(i + 1) * n], col);
            }
            let inv = 1.0 / l[(k, k)];
            col.iter_mut().for_each(|v| *v *= inv);
        }
        x
    }

    /// Solves `X L = g` for `X`.
    pub fn right_solve_l(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.chol.l_dirty();
        let (n, q) = (g.nrows(), l.nrows());
        debug_assert_eq!(g.ncols(), q);
        let mut x = g.clone();
        let xs = x.as_mut_slice();
        for k in (0..q).rev() {
            let (head, done) = xs.split_at_mut((k + 1) * n);
            let col = &mut head[k * n..];
            for i in (k + 1)..q {
                let j = i - k - 1;
                axpy(-l[(i, k)], &done[j * n..(j + 1) * n], col);
            }
            let inv = 1.0 / l[(k, k)];
            col.iter_mut().for_each(|v| *v *= inv);
        }
        x
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// In-place `L X = B` column by column; reads only the lower triangle of `l`.
fn forward_substitute(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let q = l.nrows();
    debug_assert_eq!(b.nrows(), q);
    let ls = l.as_slice();
    for col in b.as_mut_slice().chunks_exact_mut(q.max(1)) {
        for k in 0..q {
            let lk = &ls[k * q..(k + 1) * q];
            let xk = col[k] / lk[k];
            col[k] = xk;
            if xk != 0.0 {
                for i in (k + 1)..q {
                    col[i] -= lk[i] * xk;
                }
            }
        }
    }
}

/// In-place `L^T X = B` column by column; reads only the lower triangle of `l`.
fn back_substitute_t(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let q = l.nrows();
    debug_assert_eq!(b.nrows(), q);
    let ls = l.as_slice();
    for col in b.as_mut_slice().chunks_exact_mut(q.max(1)) {
        for k in (0..q).rev() {
            let lk = &ls[k * q..(k + 1) * q];
            let mut acc = col[k];
            for i in (k + 1)..q {
                acc -= lk[i] * col[i];
            }
            col[k] = acc / lk[k];
        }
    }
}

/// `base_jitter` scaled by the mean of the diagonal, the default escalation base.
pub fn default_jitter(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows().max(1) as f64;
    DEFAULT_RELATIVE_JITTER * (k.diagonal().sum() / n).abs().max(f64::MIN_POSITIVE)
}

/// Factorizes `k + eps I` for the smallest `eps` in
/// `{0, base_jitter * 10^j : j = 0..7}` that succeeds.
pub fn chol_jittered(k: &DMatrix<f64>, base_jitter: f64) -> Result<JitteredCholesky> {
    debug_assert!(k.is_square());
    debug_assert!({
        let scale = k.amax().max(1.0);
        (k - k.transpose()).amax() <= 1e-10 * scale
    });
    let levels = std::iter::once(0.0)
        .chain((0..JITTER_LEVELS).map(|j| base_jitter * 10f64.powi(j)));
    for eps in levels {
        let mut shifted = k.clone();
        if eps > 0.0 {
            for i in 0..shifted.nrows() {
                shifted[(i, i)] += eps;
            }
        }
        if let Some(chol) = Cholesky::new(shifted) {
            let l = chol.l_dirty();
            let healthy = (0..l.nrows()).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0);
            if healthy {
                if eps > 0.0 {
                    JITTER_EVENTS.with(|c| c.set(c.get() + 1));
                    log::trace!("cholesky needed jitter {eps:e}");
                }
                return Ok(JitteredCholesky { chol, jitter: eps });
            }
        }
    }
    Err(Error::NotPositiveDefinite {
        max_jitter: base_jitter * 10f64.powi(JITTER_LEVELS - 1),
    })
}

/// The public projection pair: `A` plus the residual covariance (full when
/// small enough, otherwise only its diagonal).
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    pub a: DMatrix<f64>,
    pub residual_diag: DVector<f64>,
    pub residual_full: Option<DMatrix<f64>>,
    pub jitter: f64,
}

/// Internals of the projection retained for reverse-mode gradients.
#[derive(Debug, Clone)]
pub struct Projection {
    pub a: DMatrix<f64>,
    /// Clamped at zero from below.
    pub residual_diag: DVector<f64>,
    /// `true` where the raw residual was negative and got clamped.
    pub clamped: Vec<bool>,
    pub cross: DMatrix<f64>,
    pub inducing_chol: JitteredCholesky,
}

/// Computes `A` and `diag(K)` for inputs `x` against the inducing set.
pub fn project_diag(
    x: &DMatrix<f64>,
    z: &InducingSet,
    params: &KernelParams,
) -> Result<Projection> {
    let kzz = cov_symmetric(z.points(), params);
    let chol = chol_jittered(&kzz, default_jitter(&kzz))?;
    project_with(x, z, params, chol)
}

pub(crate) fn project_with(
    x: &DMatrix<f64>,
    z: &InducingSet,
    params: &KernelParams,
    chol: JitteredCholesky,
) -> Result<Projection> {
    let cross = cov_matrix(x, z.points(), params);
    let a = chol.solve(&cross.transpose()).transpose();
    let var = params.variance();
    let mut clamped = vec![false; x.nrows()];
    let residual_diag = DVector::from_fn(x.nrows(), |n, _| {
        let explained: f64 = a.row(n).dot(&cross.row(n));
        let raw = var - explained;
        if raw < 0.0 {
            clamped[n] = true;
            0.0
        } else {
            raw
        }
    });
    Ok(Projection {
        a,
        residual_diag,
        clamped,
        cross,
        inducing_chol: chol,
    })
}

/// The projection in whitened coordinates: `B = C_xz L^{-T}` with
/// `L L^T = C_zz + jitter I`, so that `A = B L^{-1}` and
/// `diag(K) = diag(C_xx) - rownorm^2(B)`.
#[derive(Debug, Clone)]
pub struct Whitened {
    pub b: DMatrix<f64>,
    /// Clamped at zero from below.
    pub residual_diag: DVector<f64>,
    pub clamped: Vec<bool>,
    pub cross: DMatrix<f64>,
    pub chol: JitteredCholesky,
}

pub fn whiten(x: &DMatrix<f64>, z: &InducingSet, params: &KernelParams) -> Result<Whitened> {
    let kzz = cov_symmetric(z.points(), params);
    let chol = chol_jittered(&kzz, default_jitter(&kzz))?;
    whiten_with(x, z, params, chol)
}

pub fn whiten_with(
    x: &DMatrix<f64>,
    z: &InducingSet,
    params: &KernelParams,
    chol: JitteredCholesky,
) -> Result<Whitened> {
    let cross = cov_matrix(x, z.points(), params);
    let b = chol.right_solve_lt(&cross);
    let var = params.variance();
    let mut row_norm2 = vec![0.0; x.nrows()];
    for col in b.column_iter() {
        for (acc, v) in row_norm2.iter_mut().zip(col.iter()) {
            *acc += v * v;
        }
    }
    let mut clamped = vec![false; x.nrows()];
    let residual_diag = DVector::from_fn(x.nrows(), |n, _| {
        let raw = var - row_norm2[n];
        if raw < 0.0 {
            clamped[n] = true;
            0.0
        } else {
            raw
        }
    });
    Ok(Whitened {
        b,
        residual_diag,
        clamped,
        cross,
        chol,
    })
}

/// Reverse-mode step through `L = chol(K)`: maps a sensitivity on the lower
/// triangle of `L` to one on `K`.
pub fn cholesky_backprop(l: &DMatrix<f64>, chol: &JitteredCholesky, d_l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut p = l.tr_mul(&d_l.lower_triangle());
    for i in 0..n {
        p[(i, i)] *= 0.5;
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
    }
    // L^{-T} P L^{-1}
    chol.right_solve_l(&chol.solve_upper_t(&p))
}

/// `A = C_xz C_zz^{-1}` and `K = C_xx - A C_zx`, with `diag(K)` clamped at zero.
pub fn projection(
    x: &DMatrix<f64>,
    z: &InducingSet,
    params: &KernelParams,
) -> Result<ProjectionPair> {
    let p = project_diag(x, z, params)?;
    let residual_full = if x.nrows() <= FULL_RESIDUAL_LIMIT {
        let mut k = cov_symmetric(x, params) - &p.a * p.cross.transpose();
        for n in 0..x.nrows() {
            k[(n, n)] = p.residual_diag[n];
        }
        // symmetrize round-off
        let kt = k.transpose();
        Some((k + kt) * 0.5)
    } else {
        None
    };
    Ok(ProjectionPair {
        jitter: p.inducing_chol.jitter(),
        a: p.a,
        residual_diag: p.residual_diag,
        residual_full,
    })
}

/// Gradient of a scalar objective with respect to one latent's kernel
/// hyperparameters and inducing locations.
#[derive(Debug, Clone)]
pub struct KernelGrad {
    pub log_variance: f64,
    pub log_lengthscale: f64,
    pub inducing: DMatrix<f64>,
}

/// Chains sensitivities with respect to `C_xz`, `C_zz` and `diag(C_xx)` back
/// onto the log hyperparameters and inducing points.
///
/// `d_kzz` need not be symmetric; each entry is treated as an independent
/// function of the inputs.
pub fn backprop_kernel(
    x: &DMatrix<f64>,
    z: &InducingSet,
    params: &KernelParams,
    cross: &DMatrix<f64>,
    d_cross: &DMatrix<f64>,
    kzz: &DMatrix<f64>,
    d_kzz: &DMatrix<f64>,
    d_diag_sum: f64,
) -> KernelGrad {
    let zp = z.points();
    let d = zp.ncols();
    let inv_ell2 = 1.0 / params.lengthscale().powi(2);
    let mut g_var = d_diag_sum * params.variance();
    let mut g_len = 0.0;
    let mut g_z = DMatrix::zeros(zp.nrows(), d);

    for n in 0..x.nrows() {
        for q in 0..zp.nrows() {
            let w = d_cross[(n, q)] * cross[(n, q)];
            if w == 0.0 {
                continue;
            }
            g_var += w;
            let r2 = sq_dist_rows(x, n, zp, q);
            g_len += w * r2 * inv_ell2;
            for k in 0..d {
                g_z[(q, k)] += w * (x[(n, k)] - zp[(q, k)]) * inv_ell2;
            }
        }
    }
    for q in 0..zp.nrows() {
        for p in 0..zp.nrows() {
            let w = d_kzz[(q, p)] * kzz[(q, p)];
            if w == 0.0 {
                continue;
            }
            g_var += w;
            if q == p {
                continue;
            }
            let r2 = sq_dist_rows(zp, q, zp, p);
            g_len += w * r2 * inv_ell2;
            for k in 0..d {
                let delta = (zp[(p, k)] - zp[(q, k)]) * inv_ell2;
                g_z[(q, k)] += w * delta;
                g_z[(p, k)] -= w * delta;
            }
        }
    }
    KernelGrad {
        log_variance: g_var,
        log_lengthscale: g_len,
        inducing: g_z,
    }
}
