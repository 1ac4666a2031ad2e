//! Everything that runs at a unit. The dataset and personal parameters
//! defined here never leave this side of the wire.

use std::net::{SocketAddr, TcpStream};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::wire::{read_frame, write_frame, Frame, FrameKind, InputSummary};
use super::{FedConfig, UnitRoundRecord};
use crate::error::{Error, Result};
use crate::kernels::jitter_events;
use crate::objective::{sample_batch, ModelKind, UnitProblem};
use crate::optim::Adam;
use crate::params::{GlobalParams, GlobalShape, PersonalParams, PriorHypers, RoundMessage, UnitDataset};

const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1;
pub const NOISE_FLOOR: f64 = 1e-3;

/// A ChaCha stream keyed by the run seed, the unit and a purpose tag, so
/// every unit draws the same numbers whatever the transport or thread layout.
pub(crate) fn unit_rng(seed: u64, unit_id: u32, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((unit_id as u64) << 8) | purpose);
    rng
}

pub fn summarize(data: &UnitDataset) -> InputSummary {
    let x = data.inputs();
    let (lo, hi) = (0..x.ncols())
        .map(|k| {
            let col = x.column(k);
            (col.min(), col.max())
        })
        .unzip();
    InputSummary {
        unit_id: data.unit_id,
        count: data.len() as u64,
        lo,
        hi,
    }
}

/// Local initialization of the personal parameters: random coefficient
/// means, half the slab standard deviation, and half the output spread as
/// noise level.
pub fn init_personal(data: &UnitDataset, prior: &PriorHypers, seed: u64) -> PersonalParams {
    let mut rng = unit_rng(seed, data.unit_id, STREAM_INIT);
    let normal = Normal::new(0.0, 0.5).expect("fixed standard deviation");
    let nl = prior.num_latents;
    let y = data.outputs();
    let n = y.len() as f64;
    let mean = y.mean();
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let noise = (var.sqrt() / 2.0).max(NOISE_FLOOR);
    PersonalParams {
        mu_w: (0..nl).map(|_| normal.sample(&mut rng)).collect(),
        log_sigma_w: vec![(0.5 * prior.slab_variance.sqrt()).ln(); nl],
        log_noise: noise.ln(),
    }
}

/// Which global coordinates the optimizer may move. `freeze_kernel` pins the
/// variance and length-scale of every latent.
pub fn trainable_mask(
    shape: GlobalShape,
    model: ModelKind,
    train_inducing: bool,
    freeze_kernel: bool,
) -> Vec<bool> {
    let mut mask = vec![true; shape.len()];
    if freeze_kernel {
        for l in 0..shape.latents {
            let start = shape.latent_offset(l) + shape.kernel_offset();
            mask[start..start + 2].fill(false);
        }
    }
    if !train_inducing {
        let zlen = shape.inducing * shape.dim;
        for l in 0..shape.latents {
            let start = shape.latent_offset(l) + shape.inducing_offset();
            mask[start..start + zlen].fill(false);
        }
    }
    if model == ModelKind::Dense {
        mask[shape.gamma_offset()..].fill(false);
    }
    mask
}

/// A unit between rounds: its data, personal parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct UnitState {
    pub dataset: UnitDataset,
    pub personal: PersonalParams,
    pub optimizer: Adam,
    rng: ChaCha8Rng,
}

impl UnitState {
    pub fn new(dataset: UnitDataset, personal: PersonalParams, cfg: &FedConfig) -> Self {
        let rng = unit_rng(cfg.seed, dataset.unit_id, STREAM_BATCH);
        Self {
            dataset,
            personal,
            optimizer: Adam::new(0),
            rng,
        }
    }

    pub fn unit_id(&self) -> u32 {
        self.dataset.unit_id
    }

    /// Runs `cfg.local_steps` Adam steps on `V_m` starting from the broadcast
    /// `global` of round `round` (1-based). On failure the personal parameters, optimizer and batch
    /// stream are restored to their state before the call.
    pub fn local_update(
        &mut self,
        global: &GlobalParams,
        round: u64,
        weight: f64,
        prior: &PriorHypers,
        cfg: &FedConfig,
    ) -> Result<GlobalParams> {
        let shape = global.shape();
        let nl = shape.latents;
        let glen = shape.len();
        let total = glen + PersonalParams::flat_len(nl);
        if self.optimizer.len() != total {
            self.optimizer = Adam::new(total);
        }
        let saved = (self.personal.clone(), self.optimizer.clone(), self.rng.clone());
        let freeze = round <= cfg.kernel_warmup_rounds as u64;
        let result = self.steps(global, freeze, weight, prior, cfg);
        if result.is_err() {
            (self.personal, self.optimizer, self.rng) = saved;
        }
        result
    }

    fn steps(
        &mut self,
        global: &GlobalParams,
        freeze_kernel: bool,
        weight: f64,
        prior: &PriorHypers,
        cfg: &FedConfig,
    ) -> Result<GlobalParams> {
        let shape = global.shape();
        let glen = shape.len();
        let nl = shape.latents;
        let mask = trainable_mask(shape, cfg.model, cfg.train_inducing, freeze_kernel);
        let adam = cfg.adam();
        let problem = UnitProblem::new(&self.dataset, prior, cfg.model, weight)?;

        let mut flat = global.to_unconstrained();
        flat.extend(self.personal.to_unconstrained());
        let mut g_now = global.clone();
        let mut p_now = self.personal.clone();
        let mut grad = vec![0.0; flat.len()];
        for _ in 0..cfg.local_steps {
            let batch = sample_batch(self.dataset.len(), cfg.batch_size.rows(), &mut self.rng);
            let ug = problem.gradient(&g_now, &p_now, batch.as_deref())?;
            if !ug.is_finite() {
                return Err(Error::NonFiniteGradient);
            }
            for (i, (dst, m)) in grad[..glen].iter_mut().zip(&mask).enumerate() {
                *dst = if *m { ug.global[i] } else { 0.0 };
            }
            grad[glen..].copy_from_slice(&ug.personal);
            self.optimizer.ascend(&adam, &mut flat, &grad);
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient);
            }
            g_now = GlobalParams::from_unconstrained(shape, &flat[..glen])?;
            p_now = PersonalParams::from_unconstrained(nl, &flat[glen..])?;
        }
        self.personal = p_now;
        Ok(g_now)
    }

    /// Handles one broadcast: local update, then the uplink reply. A numerical
    /// failure is reported as the unchanged broadcast with weight zero.
    pub fn respond(
        &mut self,
        msg: &RoundMessage,
        prior: &PriorHypers,
        cfg: &FedConfig,
    ) -> Result<(RoundMessage, UnitRoundRecord)> {
        let started = Instant::now();
        let jitter_before = jitter_events();
        let global = msg.global()?;
        let n = self.dataset.len() as f64;
        if !(msg.weight >= n) {
            return Err(Error::ProtocolViolation(format!(
                "broadcast total weight {} is below this unit's {n} rows",
                msg.weight
            )));
        }
        let weight = n / msg.weight;
        let round = msg.round_index;
        let (reply, objective, failed) = match self.local_update(&global, round, weight, prior, cfg) {
            Ok(updated) => {
                let value = UnitProblem::new(&self.dataset, prior, cfg.model, weight)?
                    .objective(&updated, &self.personal)
                    .map(|b| b.total)
                    .unwrap_or(f64::NAN);
                (RoundMessage::new(round, n, &updated), value, false)
            }
            Err(e @ (Error::NonFiniteGradient | Error::NotPositiveDefinite { .. })) => {
                log::warn!("unit {} failed in round {round}: {e}", self.unit_id());
                (RoundMessage::new(round, 0.0, &global), f64::NAN, true)
            }
            Err(e) => return Err(e),
        };
        let record = UnitRoundRecord {
            round: round as usize,
            unit_id: self.unit_id(),
            objective,
            failed,
            jitter_events: jitter_events() - jitter_before,
            seconds: started.elapsed().as_secs_f64(),
        };
        Ok((reply, record))
    }
}

/// What a unit holds once the server says it is done.
#[derive(Debug, Clone)]
pub struct UnitOutcome {
    pub unit_id: u32,
    pub global: GlobalParams,
    pub personal: PersonalParams,
    pub records: Vec<UnitRoundRecord>,
}

pub struct UnitHandle {
    thread: JoinHandle<Result<UnitOutcome>>,
}

impl UnitHandle {
    pub fn wait(self) -> Result<UnitOutcome> {
        self.thread
            .join()
            .map_err(|_| Error::Transport("unit thread panicked".into()))?
    }
}

fn connect(addr: SocketAddr, timeout: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline => {
                log::debug!("connect to {addr} failed ({e}); retrying");
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(Error::Transport(format!("cannot reach {addr}: {e}"))),
        }
    }
}

/// Connects to a server and runs this unit until `DONE` arrives.
pub fn join(
    server: SocketAddr,
    dataset: UnitDataset,
    prior: PriorHypers,
    cfg: FedConfig,
) -> Result<UnitHandle> {
    cfg.validate_steps()?;
    prior.validate()?;
    let thread = thread::Builder::new()
        .name(format!("unit-{}", dataset.unit_id))
        .spawn(move || run_unit(server, dataset, prior, cfg))?;
    Ok(UnitHandle { thread })
}

fn run_unit(
    server: SocketAddr,
    dataset: UnitDataset,
    prior: PriorHypers,
    cfg: FedConfig,
) -> Result<UnitOutcome> {
    let timeout = cfg.io_timeout();
    let mut stream = connect(server, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    write_frame(&mut stream, &Frame::Hello(summarize(&dataset)))?;

    let personal = init_personal(&dataset, &prior, cfg.seed);
    let mut state = UnitState::new(dataset, personal, &cfg);
    let mut records = Vec::new();
    loop {
        match read_frame(&mut stream)? {
            Frame::Round(FrameKind::Broadcast, msg) => {
                let (reply, record) = state.respond(&msg, &prior, &cfg)?;
                records.push(record);
                write_frame(&mut stream, &Frame::Round(FrameKind::Uplink, reply))?;
            }
            Frame::Round(FrameKind::Done, msg) => {
                return Ok(UnitOutcome {
                    unit_id: state.unit_id(),
                    global: msg.global()?,
                    personal: state.personal,
                    records,
                });
            }
            other => {
                return Err(Error::ProtocolViolation(format!(
                    "unit received unexpected {:?} frame",
                    other.kind()
                )))
            }
        }
    }
}
