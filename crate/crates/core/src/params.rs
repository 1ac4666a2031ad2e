//! Parameter types, the flat unconstrained view used by the optimizer, the
//! weighted average applied by the aggregator, and the binary wire payload.
//!
//! Every positive quantity is stored by its logarithm and every probability by
//! its logit, so the flat vector is a plain copy of the stored fields and
//! `from_unconstrained(to_unconstrained(p)) == p` holds bit for bit.
//!
//! # Global payload layout (version 1, little endian)
//!
//! ```text
//! magic      4 bytes  "FMGP"
//! version    u32      1
//! latents    u32      L
//! inducing   u32      Q
//! dim        u32      d
//! L times:
//!   mean         Q   x f64
//!   log_diag     Q   x f64   log of the Cholesky-factor diagonal
//!   lower        Q(Q-1)/2 x f64   strict lower triangle, row major
//!   log_variance f64
//!   log_length   f64
//!   inducing     Q*d x f64   row major
//! gamma_logit L x f64
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{chol_jittered, cov_symmetric, default_jitter, InducingSet, KernelParams};

pub const GLOBAL_MAGIC: [u8; 4] = *b"FMGP";
pub const GLOBAL_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One unit's observations. Never leaves the unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitDataset {
    pub unit_id: u32,
    inputs: DMatrix<f64>,
    outputs: DVector<f64>,
}

impl UnitDataset {
    pub fn new(unit_id: u32, inputs: DMatrix<f64>, outputs: DVector<f64>) -> Result<Self> {
        if inputs.nrows() != outputs.len() {
            return Err(Error::InvalidDataset(format!(
                "unit {unit_id}: {} input rows but {} outputs",
                inputs.nrows(),
                outputs.len()
            )));
        }
        if outputs.is_empty() {
            return Err(Error::EmptyDataset(unit_id));
        }
        if inputs.ncols() == 0 {
            return Err(Error::InvalidDataset(format!(
                "unit {unit_id}: inputs have no columns"
            )));
        }
        if inputs.iter().chain(outputs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "unit {unit_id}: non-finite value"
            )));
        }
        Ok(Self {
            unit_id,
            inputs,
            outputs,
        })
    }

    /// Convenience constructor for one-dimensional inputs.
    pub fn from_1d(unit_id: u32, xs: &[f64], ys: &[f64]) -> Result<Self> {
        Self::new(
            unit_id,
            DMatrix::from_column_slice(xs.len(), 1, xs),
            DVector::from_column_slice(ys),
        )
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DVector<f64> {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(idx.len(), self.dim(), |i, k| self.inputs[(idx[i], k)]);
        let y = DVector::from_fn(idx.len(), |i, _| self.outputs[idx[i]]);
        (x, y)
    }
}

/// Lower-triangular factor with a positive diagonal, stored as
/// log-diagonal plus strict lower triangle (row major).
#[derive(Debug, Clone, PartialEq)]
pub struct TriFactor {
    size: usize,
    log_diag: Vec<f64>,
    lower: Vec<f64>,
}

impl TriFactor {
    pub fn strict_len(size: usize) -> usize {
        size * size.saturating_sub(1) / 2
    }

    pub fn identity(size: usize) -> Self {
        Self {
            size,
            log_diag: vec![0.0; size],
            lower: vec![0.0; Self::strict_len(size)],
        }
    }

    pub fn from_parts(log_diag: Vec<f64>, lower: Vec<f64>) -> Result<Self> {
        let size = log_diag.len();
        if lower.len() != Self::strict_len(size) {
            return Err(Error::DimensionMismatch {
                expected: Self::strict_len(size),
                actual: lower.len(),
            });
        }
        Ok(Self {
            size,
            log_diag,
            lower,
        })
    }

    /// Takes the lower triangle of `m`; its diagonal must be positive.
    pub fn from_lower(m: &DMatrix<f64>) -> Result<Self> {
        let size = m.nrows();
        let mut log_diag = Vec::with_capacity(size);
        let mut lower = Vec::with_capacity(Self::strict_len(size));
        for i in 0..size {
            for j in 0..i {
                lower.push(m[(i, j)]);
            }
            if !(m[(i, i)] > 0.0) {
                return Err(Error::ShapeMismatch(format!(
                    "factor diagonal entry {i} is not positive"
                )));
            }
            log_diag.push(m[(i, i)].ln());
        }
        Ok(Self {
            size,
            log_diag,
            lower,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn log_diag(&self) -> &[f64] {
        &self.log_diag
    }

    pub fn strict_lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.size, self.size);
        let mut k = 0;
        for i in 0..self.size {
            for j in 0..i {
                m[(i, j)] = self.lower[k];
                k += 1;
            }
            m[(i, i)] = self.log_diag[i].exp();
        }
        m
    }

    /// `factor * factor^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let l = self.matrix();
        &l * l.transpose()
    }
}

/// Variational Gaussian over one latent's inducing values, in whitened
/// coordinates: `u = L_z v` with `v ~ N(mean, cov_factor cov_factor^T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVariational {
    pub mean: DVector<f64>,
    pub cov_factor: TriFactor,
}

/// Everything global that belongs to a single latent function.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFunction {
    pub variational: LatentVariational,
    pub kernel: KernelParams,
    pub inducing: InducingSet,
}

impl LatentFunction {
    /// Mean and covariance of the inducing values implied by the whitened
    /// surrogate: `(L_z m, L_z L_f L_f^T L_z^T)`.
    pub fn inducing_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let kzz = cov_symmetric(self.inducing.points(), &self.kernel);
        let lz = chol_jittered(&kzz, default_jitter(&kzz))?.l();
        let mean = &lz * &self.variational.mean;
        let half = lz * self.variational.cov_factor.matrix();
        let cov = &half * half.transpose();
        Ok((mean, cov))
    }
}

/// Sizes that fix the flat layout of [`GlobalParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalShape {
    pub latents: usize,
    pub inducing: usize,
    pub dim: usize,
}

impl GlobalShape {
    pub fn per_latent(&self) -> usize {
        let q = self.inducing;
        q + q + TriFactor::strict_len(q) + 2 + q * self.dim
    }

    pub fn len(&self) -> usize {
        self.latents * self.per_latent() + self.latents
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_offset(&self, l: usize) -> usize {
        l * self.per_latent()
    }

    /// Offset of the `[log_diag | strict lower]` block within a latent.
    pub fn factor_offset(&self) -> usize {
        self.inducing
    }

    /// Offset of `log_variance` within a latent; `log_lengthscale` follows.
    pub fn kernel_offset(&self) -> usize {
        2 * self.inducing + TriFactor::strict_len(self.inducing)
    }

    pub fn inducing_offset(&self) -> usize {
        self.kernel_offset() + 2
    }

    pub fn gamma_offset(&self) -> usize {
        self.latents * self.per_latent()
    }
}

/// Parameters shared across units: variational moments and kernel of every
/// latent plus the inclusion logits. The only payload on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub latents: Vec<LatentFunction>,
    pub gamma_logit: Vec<f64>,
}

impl GlobalParams {
    pub fn new(latents: Vec<LatentFunction>, gamma_logit: Vec<f64>) -> Result<Self> {
        let g = Self {
            latents,
            gamma_logit,
        };
        g.check()?;
        Ok(g)
    }

    fn check(&self) -> Result<()> {
        let Some(first) = self.latents.first() else {
            return Err(Error::ShapeMismatch("need at least one latent".into()));
        };
        if self.gamma_logit.len() != self.latents.len() {
            return Err(Error::DimensionMismatch {
                expected: self.latents.len(),
                actual: self.gamma_logit.len(),
            });
        }
        let (q, d) = (first.inducing.len(), first.inducing.dim());
        for lf in &self.latents {
            if lf.inducing.len() != q
                || lf.inducing.dim() != d
                || lf.variational.mean.len() != q
                || lf.variational.cov_factor.size() != q
            {
                return Err(Error::ShapeMismatch(
                    "latents disagree on inducing count or input dimension".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> GlobalShape {
        let first = &self.latents[0];
        GlobalShape {
            latents: self.latents.len(),
            inducing: first.inducing.len(),
            dim: first.inducing.dim(),
        }
    }

    pub fn num_latents(&self) -> usize {
        self.latents.len()
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.gamma_logit.iter().map(|&g| sigmoid(g)).collect()
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let shape = self.shape();
        let mut out = Vec::with_capacity(shape.len());
        for lf in &self.latents {
            out.extend(lf.variational.mean.iter());
            out.extend_from_slice(lf.variational.cov_factor.log_diag());
            out.extend_from_slice(lf.variational.cov_factor.strict_lower());
            out.push(lf.kernel.log_variance);
            out.push(lf.kernel.log_lengthscale);
            let z = lf.inducing.points();
            for i in 0..z.nrows() {
                for k in 0..z.ncols() {
                    out.push(z[(i, k)]);
                }
            }
        }
        out.extend_from_slice(&self.gamma_logit);
        out
    }

    pub fn from_unconstrained(shape: GlobalShape, v: &[f64]) -> Result<Self> {
        if v.len() != shape.len() {
            return Err(Error::DimensionMismatch {
                expected: shape.len(),
                actual: v.len(),
            });
        }
        let q = shape.inducing;
        let mut cursor = v.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { cursor.by_ref().take(n).collect() };
        let mut latents = Vec::with_capacity(shape.latents);
        for _ in 0..shape.latents {
            let mean = DVector::from_vec(take(q));
            let log_diag = take(q);
            let lower = take(TriFactor::strict_len(q));
            let kv = take(2);
            let z = take(q * shape.dim);
            latents.push(LatentFunction {
                variational: LatentVariational {
                    mean,
                    cov_factor: TriFactor::from_parts(log_diag, lower)?,
                },
                kernel: KernelParams {
                    log_variance: kv[0],
                    log_lengthscale: kv[1],
                },
                inducing: InducingSet::from_raw(DMatrix::from_row_slice(q, shape.dim, &z)),
            });
        }
        let gamma_logit = take(shape.latents);
        Ok(Self {
            latents,
            gamma_logit,
        })
    }

    /// Returns the copy restricted to the latents in `keep`, in that order.
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        let latents = keep
            .iter()
            .map(|&l| {
                self.latents.get(l).cloned().ok_or(Error::DimensionMismatch {
                    expected: self.latents.len(),
                    actual: l,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gamma_logit = keep.iter().map(|&l| self.gamma_logit[l]).collect();
        Self::new(latents, gamma_logit)
    }

    pub fn is_valid(&self) -> bool {
        self.latents.iter().all(|lf| {
            lf.kernel.is_valid()
                && lf.variational.mean.iter().all(|v| v.is_finite())
                && lf
                    .variational
                    .cov_factor
                    .log_diag()
                    .iter()
                    .all(|v| v.exp().is_finite() && v.exp() > 0.0)
        }) && self.gamma().iter().all(|g| (0.0..=1.0).contains(g))
    }
}

/// A unit's private parameters: coefficient moments and noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalParams {
    pub mu_w: Vec<f64>,
    pub log_sigma_w: Vec<f64>,
    pub log_noise: f64,
}

impl PersonalParams {
    pub fn num_latents(&self) -> usize {
        self.mu_w.len()
    }

    pub fn sigma_w(&self) -> Vec<f64> {
        self.log_sigma_w.iter().map(|v| v.exp()).collect()
    }

    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn flat_len(latents: usize) -> usize {
        2 * latents + 1
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::flat_len(self.num_latents()));
        out.extend_from_slice(&self.mu_w);
        out.extend_from_slice(&self.log_sigma_w);
        out.push(self.log_noise);
        out
    }

    pub fn from_unconstrained(latents: usize, v: &[f64]) -> Result<Self> {
        if v.len() != Self::flat_len(latents) {
            return Err(Error::DimensionMismatch {
                expected: Self::flat_len(latents),
                actual: v.len(),
            });
        }
        Ok(Self {
            mu_w: v[..latents].to_vec(),
            log_sigma_w: v[latents..2 * latents].to_vec(),
            log_noise: v[2 * latents],
        })
    }

    pub fn restrict(&self, keep: &[usize]) -> Self {
        Self {
            mu_w: keep.iter().map(|&l| self.mu_w[l]).collect(),
            log_sigma_w: keep.iter().map(|&l| self.log_sigma_w[l]).collect(),
            log_noise: self.log_noise,
        }
    }
}

/// Spike-and-slab prior and model sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorHypers {
    pub pi: f64,
    pub slab_variance: f64,
    pub num_latents: usize,
    pub num_inducing: usize,
}

impl Default for PriorHypers {
    fn default() -> Self {
        Self {
            pi: 0.5,
            slab_variance: 1.0,
            num_latents: 10,
            num_inducing: 20,
        }
    }
}

impl PriorHypers {
    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::InvalidConfig(format!("pi must lie in (0,1), got {}", self.pi)));
        }
        if !(self.slab_variance > 0.0 && self.slab_variance.is_finite()) {
            return Err(Error::InvalidConfig("slab variance must be positive".into()));
        }
        if self.num_latents == 0 || self.num_inducing == 0 {
            return Err(Error::InvalidConfig(
                "need at least one latent and one inducing point".into(),
            ));
        }
        Ok(())
    }
}

// --- averaging -----------------------------------------------------------

/// Weighted mean of several global parameter sets, taken coordinate-wise in
/// the unconstrained space. Weights are typically `N_m`.
///
/// The mean is accumulated as `x_ref + sum_m (w_m / W) (x_m - x_ref)` with the
/// first positive-weight entry as reference, so identical inputs come back
/// unchanged bit for bit.
pub fn average_globals(items: &[(GlobalParams, f64)]) -> Result<GlobalParams> {
    let Some((first, _)) = items.first() else {
        return Err(Error::ShapeMismatch("nothing to average".into()));
    };
    let shape = first.shape();
    if let Some((bad, _)) = items.iter().find(|(g, _)| g.shape() != shape) {
        return Err(Error::ShapeMismatch(format!(
            "expected {shape:?}, got {:?}",
            bad.shape()
        )));
    }
    if items.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidConfig("weights must be finite and non-negative".into()));
    }
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let Some(reference) = items.iter().position(|(_, w)| *w > 0.0) else {
        return Err(Error::InvalidConfig("total weight is zero".into()));
    };

    let base = items[reference].0.to_unconstrained();
    let mut acc = vec![0.0; base.len()];
    for (g, w) in items {
        if *w == 0.0 {
            continue;
        }
        let share = w / total;
        for ((a, x), b) in acc.iter_mut().zip(g.to_unconstrained()).zip(&base) {
            *a += share * (x - b);
        }
    }
    let mean: Vec<f64> = base.iter().zip(&acc).map(|(b, a)| b + a).collect();
    GlobalParams::from_unconstrained(shape, &mean)
}

// --- binary encoding -----------------------------------------------------

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::TruncatedPayload {
                needed: self.pos + n,
                available: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub(crate) fn finish(self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(Error::TrailingBytes(extra)),
        }
    }
}

fn put_f64s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_header(r: &mut Reader<'_>, magic: [u8; 4], version: u32) -> Result<()> {
    let got_magic = r.bytes(4)?;
    let got_version = r.u32()?;
    if got_magic != magic {
        return Err(Error::VersionMismatch {
            expected: version,
            found: u32::from_le_bytes(got_magic.try_into().unwrap()),
        });
    }
    if got_version != version {
        return Err(Error::VersionMismatch {
            expected: version,
            found: got_version,
        });
    }
    Ok(())
}

pub fn serialize_global(g: &GlobalParams) -> Vec<u8> {
    let shape = g.shape();
    let mut out = Vec::with_capacity(20 + 8 * shape.len());
    out.extend_from_slice(&GLOBAL_MAGIC);
    out.extend_from_slice(&GLOBAL_VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.latents as u32).to_le_bytes());
    out.extend_from_slice(&(shape.inducing as u32).to_le_bytes());
    out.extend_from_slice(&(shape.dim as u32).to_le_bytes());
    put_f64s(&mut out, g.to_unconstrained());
    out
}

pub fn deserialize_global(bytes: &[u8]) -> Result<GlobalParams> {
    let mut r = Reader::new(bytes);
    read_header(&mut r, GLOBAL_MAGIC, GLOBAL_VERSION)?;
    let shape = GlobalShape {
        latents: r.u32()? as usize,
        inducing: r.u32()? as usize,
        dim: r.u32()? as usize,
    };
    if shape.latents == 0 || shape.inducing == 0 || shape.dim == 0 {
        return Err(Error::ShapeMismatch(format!("degenerate payload shape {shape:?}")));
    }
    let flat = r.f64s(shape.len())?;
    r.finish()?;
    GlobalParams::from_unconstrained(shape, &flat)
}

/// A single message of the round protocol: the round index, the sender's
/// weight, and a serialized [`GlobalParams`].
///
/// Uplink messages carry `N_m` as weight (0 when the unit failed the round);
/// downlink messages carry the federation's total sample count, which units
/// need for the `N_m / N` weight of the latent KL term.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub round_index: u64,
    pub weight: f64,
    pub payload: Vec<u8>,
}

impl RoundMessage {
    pub fn new(round_index: u64, weight: f64, global: &GlobalParams) -> Self {
        Self {
            round_index,
            weight,
            payload: serialize_global(global),
        }
    }

    pub fn global(&self) -> Result<GlobalParams> {
        deserialize_global(&self.payload)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.payload.len());
        out.extend_from_slice(&self.round_index.to_le_bytes());
        out.extend_from_slice(&self.weight.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let round_index = r.u64()?;
        let weight = r.f64()?;
        let len = r.u32()? as usize;
        let payload = r.bytes(len)?.to_vec();
        r.finish()?;
        // validate eagerly so malformed payloads never reach the aggregator
        deserialize_global(&payload)?;
        Ok(Self {
            round_index,
            weight,
            payload,
        })
    }
}

// --- checkpoints ---------------------------------------------------------

/// Checkpoint file: a sidecar metadata block followed by the global payload.
///
/// ```text
/// magic "FMCK" | version u32 = 1 | round u64 | pi f64 | slab_variance f64
/// | num_latents u32 | num_inducing u32 | payload_len u64 | payload
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round_index: u64,
    pub prior: PriorHypers,
    pub global: GlobalParams,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let payload = serialize_global(&self.global);
        let mut out = Vec::with_capacity(48 + payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.round_index.to_le_bytes());
        out.extend_from_slice(&self.prior.pi.to_le_bytes());
        out.extend_from_slice(&self.prior.slab_variance.to_le_bytes());
        out.extend_from_slice(&(self.prior.num_latents as u32).to_le_bytes());
        out.extend_from_slice(&(self.prior.num_inducing as u32).to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        read_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let round_index = r.u64()?;
        let prior = PriorHypers {
            pi: r.f64()?,
            slab_variance: r.f64()?,
            num_latents: r.u32()? as usize,
            num_inducing: r.u32()? as usize,
        };
        let len = r.u64()? as usize;
        let global = deserialize_global(r.bytes(len)?)?;
        r.finish()?;
        Ok(Self {
            round_index,
            prior,
            global,
        })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
