//! Federated training rounds: broadcast, local ascent at every unit,
//! weighted averaging at the server.
//!
//! The same unit and server code runs under both transports. In-process runs
//! pass encoded [`RoundMessage`]s between rayon tasks; socket runs push the
//! identical bytes through TCP frames (see [`wire`]).

pub mod server;
pub mod unit;
pub mod wire;

use std::fmt;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::ModelKind;
use crate::optim::AdamConfig;
use crate::params::{Checkpoint, GlobalParams, PersonalParams, PriorHypers, RoundMessage, UnitDataset};

pub use server::{central_update, init_global, serve, ServerHandle, ServerOutcome};
pub use unit::{init_personal, join, summarize, UnitHandle, UnitOutcome, UnitState};

/// Rows per gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    #[default]
    Full,
    Rows(usize),
}

impl BatchSize {
    pub fn rows(&self) -> Option<usize> {
        match self {
            BatchSize::Full => None,
            BatchSize::Rows(b) => Some(*b),
        }
    }
}

impl FromStr for BatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(BatchSize::Full);
        }
        match s.parse::<usize>() {
            Ok(b) if b >= 1 => Ok(BatchSize::Rows(b)),
            _ => Err(Error::InvalidConfig(format!(
                "batch size must be \"full\" or a positive integer, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Full => f.write_str("full"),
            BatchSize::Rows(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub learning_rate: f64,
    pub batch_size: BatchSize,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub model: ModelKind,
    /// Let the optimizer move inducing locations.
    pub train_inducing: bool,
    /// Kernel variances and length-scales stay at their initial values for
    /// this many opening rounds.
    pub kernel_warmup_rounds: usize,
    /// Write a checkpoint every this many rounds (requires `checkpoint_dir`).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub io_timeout_secs: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_steps: 25,
            learning_rate: 0.01,
            batch_size: BatchSize::Full,
            seed: 0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            model: ModelKind::SpikeSlab,
            train_inducing: false,
            kernel_warmup_rounds: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
            io_timeout_secs: 120,
        }
    }
}

impl FedConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
        }
    }

    pub fn io_timeout(&self) -> Duration {
        Duration::from_secs(self.io_timeout_secs.max(1))
    }

    /// Everything except the round count.
    pub fn validate_steps(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.local_steps == 0 {
            return bad("local_steps must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == BatchSize::Rows(0) {
            return bad("batch_size must be at least 1");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam betas must lie in [0,1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be at least 1");
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return bad("checkpoint_every needs checkpoint_dir");
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be at least 1".into()));
        }
        self.validate_steps()
    }
}

pub(crate) fn write_checkpoint(
    cfg: &FedConfig,
    round: usize,
    prior: &PriorHypers,
    global: &GlobalParams,
) -> Result<()> {
    let (Some(every), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_ref()) else {
        return Ok(());
    };
    if !round.is_multiple_of(every) {
        return Ok(());
    }
    std::fs::create_dir_all(dir)?;
    let ckpt = Checkpoint {
        round_index: round as u64,
        prior: *prior,
        global: global.clone(),
    };
    ckpt.write(&dir.join(format!("round_{round:05}.ckpt")))
}

/// One unit's view of a finished round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRoundRecord {
    pub round: usize,
    pub unit_id: u32,
    /// `V_m` at the unit's locally updated parameters (NaN when failed).
    pub objective: f64,
    pub failed: bool,
    pub jitter_events: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub unit_ids: Vec<u32>,
    pub unit_objectives: Vec<f64>,
    /// Sum of the finite unit objectives.
    pub aggregated: f64,
    pub wall_seconds: f64,
    pub jitter_events: u64,
    pub failed_units: Vec<u32>,
}

impl RoundRecord {
    fn assemble(round: usize, units: &[UnitRoundRecord], wall_seconds: f64) -> Self {
        Self {
            round,
            unit_ids: units.iter().map(|u| u.unit_id).collect(),
            unit_objectives: units.iter().map(|u| u.objective).collect(),
            aggregated: units
                .iter()
                .filter(|u| u.objective.is_finite())
                .map(|u| u.objective)
                .sum(),
            wall_seconds,
            jitter_events: units.iter().map(|u| u.jitter_events).sum(),
            failed_units: units.iter().filter(|u| u.failed).map(|u| u.unit_id).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rounds: Vec<RoundRecord>,
}

impl TrainLog {
    pub fn aggregated_trace(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.aggregated).collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.rounds {
            let line = serde_json::to_string(r).map_err(|e| Error::Transport(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    InProc,
    /// Serve on this address (port 0 picks a free one) and join every unit to it.
    Socket(SocketAddr),
}

/// Trained parameters of a federation.
#[derive(Debug, Clone)]
pub struct FederatedFit {
    pub global: GlobalParams,
    /// Personal parameters in ascending `unit_id` order.
    pub personal: Vec<(u32, PersonalParams)>,
    pub log: TrainLog,
}

impl FederatedFit {
    pub fn personal_for(&self, unit_id: u32) -> Option<&PersonalParams> {
        self.personal
            .iter()
            .find(|(id, _)| *id == unit_id)
            .map(|(_, p)| p)
    }
}

fn sorted_units(datasets: &[UnitDataset]) -> Result<Vec<UnitDataset>> {
    if datasets.is_empty() {
        return Err(Error::InvalidConfig("need at least one unit".into()));
    }
    let mut sorted = datasets.to_vec();
    sorted.sort_by_key(|d| d.unit_id);
    if sorted.windows(2).any(|w| w[0].unit_id == w[1].unit_id) {
        return Err(Error::InvalidConfig("unit ids must be unique".into()));
    }
    let d = sorted[0].dim();
    if let Some(bad) = sorted.iter().find(|u| u.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.dim(),
        });
    }
    Ok(sorted)
}

/// Initial global parameters from range summaries and per-unit personal
/// parameters from each unit's own data, in ascending `unit_id` order.
pub fn pre_processing(
    datasets: &[UnitDataset],
    prior: &PriorHypers,
    cfg: &FedConfig,
) -> Result<(GlobalParams, Vec<PersonalParams>)> {
    let units = sorted_units(datasets)?;
    let summaries: Vec<_> = units.iter().map(summarize).collect();
    let global = init_global(&summaries, prior, cfg.model)?;
    let personal = units
        .iter()
        .map(|u| init_personal(u, prior, cfg.seed))
        .collect();
    Ok((global, personal))
}

pub fn run_federated(
    datasets: &[UnitDataset],
    prior: &PriorHypers,
    cfg: &FedConfig,
    transport: Transport,
) -> Result<FederatedFit> {
    cfg.validate()?;
    prior.validate()?;
    match transport {
        Transport::InProc => run_in_proc(datasets, prior, cfg),
        Transport::Socket(addr) => run_socket(datasets, prior, cfg, addr),
    }
}

fn run_in_proc(
    datasets: &[UnitDataset],
    prior: &PriorHypers,
    cfg: &FedConfig,
) -> Result<FederatedFit> {
    let units = sorted_units(datasets)?;
    let (mut global, personal) = pre_processing(&units, prior, cfg)?;
    let total: f64 = units.iter().map(|u| u.len() as f64).sum();
    let mut states: Vec<UnitState> = units
        .into_iter()
        .zip(personal)
        .map(|(d, p)| UnitState::new(d, p, cfg))
        .collect();

    let mut log = TrainLog::default();
    for h in 1..=cfg.rounds {
        let started = Instant::now();
        let down = RoundMessage::new(h as u64, total, &global);
        let replies = states
            .par_iter_mut()
            .map(|s| s.respond(&down, prior, cfg))
            .collect::<Result<Vec<_>>>()?;
        let (uplinks, records): (Vec<_>, Vec<_>) = replies.into_iter().unzip();
        global = central_update(&uplinks, h)?;
        write_checkpoint(cfg, h, prior, &global)?;
        log.rounds
            .push(RoundRecord::assemble(h, &records, started.elapsed().as_secs_f64()));
    }
    Ok(FederatedFit {
        global,
        personal: states
            .into_iter()
            .map(|s| (s.unit_id(), s.personal))
            .collect(),
        log,
    })
}

fn run_socket(
    datasets: &[UnitDataset],
    prior: &PriorHypers,
    cfg: &FedConfig,
    addr: SocketAddr,
) -> Result<FederatedFit> {
    let units = sorted_units(datasets)?;
    let server = serve(&addr.to_string(), *prior, cfg.clone(), units.len())?;
    let target = server.local_addr();
    let handles = units
        .into_iter()
        .map(|d| join(target, d, *prior, cfg.clone()))
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<Result<UnitOutcome>> = handles.into_iter().map(UnitHandle::wait).collect();
    let served = server.wait()?;
    let mut outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    outcomes.sort_by_key(|o| o.unit_id);

    let mut log = TrainLog::default();
    for h in 1..=cfg.rounds {
        let records: Vec<UnitRoundRecord> = outcomes
            .iter()
            .filter_map(|o| o.records.iter().find(|r| r.round == h).cloned())
            .collect();
        let wall = served.round_seconds.get(h - 1).copied().unwrap_or(0.0);
        log.rounds.push(RoundRecord::assemble(h, &records, wall));
    }
    Ok(FederatedFit {
        global: served.global,
        personal: outcomes.into_iter().map(|o| (o.unit_id, o.personal)).collect(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_units() -> Vec<UnitDataset> {
        let xs: Vec<f64> = (0..12).map(|i| -3.0 + 0.5 * i as f64).collect();
        (0..2u32)
            .map(|m| {
                let ys: Vec<f64> = xs.iter().map(|x| (x + m as f64).sin()).collect();
                UnitDataset::from_1d(m, &xs, &ys).unwrap()
            })
            .collect()
    }

    fn tiny_prior() -> PriorHypers {
        PriorHypers {
            num_latents: 2,
            num_inducing: 4,
            ..PriorHypers::default()
        }
    }

    #[test]
    fn zero_rounds_is_rejected() {
        let cfg = FedConfig {
            rounds: 0,
            ..FedConfig::default()
        };
        let err = run_federated(&tiny_units(), &tiny_prior(), &cfg, Transport::InProc).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn zero_learning_rate_returns_the_broadcast() {
        let units = tiny_units();
        let prior = tiny_prior();
        let cfg = FedConfig {
            learning_rate: 0.0,
            local_steps: 3,
            ..FedConfig::default()
        };
        let (g0, p0) = pre_processing(&units, &prior, &cfg).unwrap();
        let mut state = UnitState::new(units[0].clone(), p0[0].clone(), &cfg);
        let g1 = state.local_update(&g0, 1, 0.5, &prior, &cfg).unwrap();
        assert_eq!(g0, g1);
        assert_eq!(state.personal, p0[0]);
    }

    #[test]
    fn kernel_warmup_pins_hyperparameters_then_releases_them() {
        let units = tiny_units();
        let prior = tiny_prior();
        let cfg = FedConfig {
            local_steps: 3,
            learning_rate: 0.05,
            kernel_warmup_rounds: 1,
            ..FedConfig::default()
        };
        let (g0, p0) = pre_processing(&units, &prior, &cfg).unwrap();
        let kernels = |g: &GlobalParams| -> Vec<(f64, f64)> {
            g.latents
                .iter()
                .map(|l| (l.kernel.variance(), l.kernel.lengthscale()))
                .collect()
        };
        let mut state = UnitState::new(units[0].clone(), p0[0].clone(), &cfg);
        let g1 = state.local_update(&g0, 1, 0.5, &prior, &cfg).unwrap();
        assert_eq!(kernels(&g1), kernels(&g0));
        assert_ne!(g1, g0);
        let g2 = state.local_update(&g1, 2, 0.5, &prior, &cfg).unwrap();
        assert_ne!(kernels(&g2), kernels(&g1));
    }

    #[test]
    fn constant_outputs_hit_the_noise_floor() {
        let d = UnitDataset::from_1d(0, &[0.0, 1.0, 2.0], &[4.0, 4.0, 4.0]).unwrap();
        let p = init_personal(&d, &tiny_prior(), 0);
        assert!((p.noise() - unit::NOISE_FLOOR).abs() < 1e-15);
    }

    #[test]
    fn checkpoints_land_on_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FedConfig {
            rounds: 4,
            local_steps: 2,
            checkpoint_every: Some(2),
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..FedConfig::default()
        };
        let fit = run_federated(&tiny_units(), &tiny_prior(), &cfg, Transport::InProc).unwrap();
        let last = Checkpoint::read(&dir.path().join("round_00004.ckpt")).unwrap();
        assert_eq!(last.global, fit.global);
        assert!(dir.path().join("round_00002.ckpt").exists());
        assert!(!dir.path().join("round_00003.ckpt").exists());
        assert_eq!(fit.log.rounds.len(), 4);
    }
}
