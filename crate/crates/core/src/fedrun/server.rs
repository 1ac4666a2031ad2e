//! The central side of a federation. It sees input-range summaries at
//! start-up and global parameter payloads afterwards, nothing else.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use super::wire::{read_frame, write_frame, Frame, FrameKind, InputSummary};
use super::{write_checkpoint, FedConfig};
use crate::error::{Error, Result};
use crate::kernels::{chol_jittered, cov_symmetric, default_jitter, InducingSet, KernelParams};
use crate::objective::{ModelKind, PINNED_GAMMA_LOGIT};
use crate::params::{
    average_globals, logit, GlobalParams, LatentFunction, LatentVariational, PriorHypers,
    RoundMessage, TriFactor,
};

/// Union of the announced per-dimension ranges, widened where degenerate.
fn union_box(summaries: &[InputSummary]) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = summaries.first() else {
        return Err(Error::InvalidConfig("no units registered".into()));
    };
    let d = first.lo.len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for s in summaries {
        if s.lo.len() != d || s.hi.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: s.lo.len(),
            });
        }
        for k in 0..d {
            lo[k] = lo[k].min(s.lo[k]);
            hi[k] = hi[k].max(s.hi[k]);
        }
    }
    for k in 0..d {
        if hi[k] - lo[k] < 1e-9 {
            lo[k] -= 0.5;
            hi[k] += 0.5;
        }
    }
    Ok((lo, hi))
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// `q` points on an even lattice over the box. In one dimension this is a
/// plain linspace; otherwise the smallest full lattice with at least `q`
/// nodes is thinned at evenly spaced indices.
pub fn inducing_grid(lo: &[f64], hi: &[f64], q: usize) -> DMatrix<f64> {
    let d = lo.len();
    if d == 1 {
        return DMatrix::from_column_slice(q, 1, &linspace(lo[0], hi[0], q));
    }
    let mut side = 1usize;
    while side.pow(d as u32) < q {
        side += 1;
    }
    let axes: Vec<Vec<f64>> = (0..d).map(|k| linspace(lo[k], hi[k], side)).collect();
    let total = side.pow(d as u32);
    DMatrix::from_fn(q, d, |i, k| {
        let mut idx = i * total / q;
        for _ in 0..k {
            idx /= side;
        }
        axes[k][idx % side]
    })
}

/// Length-scales spread geometrically over `[range/20, range/2]`.
pub fn lengthscale_ladder(range: f64, latents: usize) -> Vec<f64> {
    let (a, b) = ((range / 20.0).ln(), (range / 2.0).ln());
    if latents == 1 {
        return vec![(0.5 * (a + b)).exp()];
    }
    (0..latents)
        .map(|l| (a + (b - a) * l as f64 / (latents - 1) as f64).exp())
        .collect()
}

/// Initial global parameters built from input-range summaries alone.
pub fn init_global(
    summaries: &[InputSummary],
    prior: &PriorHypers,
    model: ModelKind,
) -> Result<GlobalParams> {
    prior.validate()?;
    let (lo, hi) = union_box(summaries)?;
    let range = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| b - a)
        .fold(0.0, f64::max);
    let q = prior.num_inducing;
    let z = InducingSet::new(inducing_grid(&lo, &hi, q))?;
    let mut latents = Vec::with_capacity(prior.num_latents);
    for ell in lengthscale_ladder(range, prior.num_latents) {
        let kernel = KernelParams::new(1.0, ell);
        // whitened surrogate equal to the prior; fail early if C_zz is unusable
        let kzz = cov_symmetric(z.points(), &kernel);
        chol_jittered(&kzz, default_jitter(&kzz))?;
        latents.push(LatentFunction {
            variational: LatentVariational {
                mean: DVector::zeros(q),
                cov_factor: TriFactor::identity(q),
            },
            kernel,
            inducing: z.clone(),
        });
    }
    let g0 = match model {
        ModelKind::SpikeSlab => logit(prior.pi),
        ModelKind::Dense => PINNED_GAMMA_LOGIT,
    };
    GlobalParams::new(latents, vec![g0; prior.num_latents])
}

/// Weighted average of the positive-weight uplinks of one round.
pub fn central_update(messages: &[RoundMessage], round: usize) -> Result<GlobalParams> {
    let items = messages
        .iter()
        .filter(|m| m.weight > 0.0)
        .map(|m| Ok((m.global()?, m.weight)))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::AllUnitsFailed(round));
    }
    average_globals(&items)
}

/// Final state of a served federation.
#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub global: GlobalParams,
    pub unit_ids: Vec<u32>,
    pub round_seconds: Vec<f64>,
}

pub struct ServerHandle {
    addr: SocketAddr,
    thread: JoinHandle<Result<ServerOutcome>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn wait(self) -> Result<ServerOutcome> {
        self.thread
            .join()
            .map_err(|_| Error::Transport("server thread panicked".into()))?
    }
}

/// Binds `bind` and coordinates `units` participants for `cfg.rounds`
/// synchronous rounds. Zero rounds is allowed: registration is followed
/// directly by `DONE`.
pub fn serve(bind: &str, prior: PriorHypers, cfg: FedConfig, units: usize) -> Result<ServerHandle> {
    cfg.validate_steps()?;
    prior.validate()?;
    if units == 0 {
        return Err(Error::InvalidConfig("server needs at least one unit".into()));
    }
    let listener = TcpListener::bind(bind)
        .map_err(|e| Error::Transport(format!("cannot bind {bind}: {e}")))?;
    let addr = listener.local_addr()?;
    let thread = thread::Builder::new()
        .name("fed-server".into())
        .spawn(move || run_server(listener, prior, cfg, units))?;
    Ok(ServerHandle { addr, thread })
}

fn accept_all(listener: &TcpListener, units: usize, timeout: Duration) -> Result<Vec<TcpStream>> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + timeout;
    let mut streams = Vec::with_capacity(units);
    while streams.len() < units {
        match listener.accept() {
            Ok((s, peer)) => {
                log::debug!("unit connected from {peer}");
                s.set_nonblocking(false)?;
                s.set_read_timeout(Some(timeout))?;
                s.set_write_timeout(Some(timeout))?;
                s.set_nodelay(true)?;
                streams.push(s);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Transport(format!(
                        "only {} of {units} units joined before the timeout",
                        streams.len()
                    )));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(Error::Transport(e.to_string())),
        }
    }
    Ok(streams)
}

fn run_server(
    listener: TcpListener,
    prior: PriorHypers,
    cfg: FedConfig,
    units: usize,
) -> Result<ServerOutcome> {
    let streams = accept_all(&listener, units, cfg.io_timeout())?;
    let mut peers = Vec::with_capacity(units);
    for mut s in streams {
        match read_frame(&mut s)? {
            Frame::Hello(summary) => peers.push((summary, s)),
            other => {
                return Err(Error::ProtocolViolation(format!(
                    "expected HELLO, got {:?}",
                    other.kind()
                )))
            }
        }
    }
    peers.sort_by_key(|(s, _)| s.unit_id);
    if peers.windows(2).any(|w| w[0].0.unit_id == w[1].0.unit_id) {
        return Err(Error::ProtocolViolation("duplicate unit id".into()));
    }
    let summaries: Vec<InputSummary> = peers.iter().map(|(s, _)| s.clone()).collect();
    let total: f64 = summaries.iter().map(|s| s.count as f64).sum();
    let mut global = init_global(&summaries, &prior, cfg.model)?;
    let mut round_seconds = Vec::with_capacity(cfg.rounds);

    for h in 1..=cfg.rounds {
        let started = Instant::now();
        let down = Frame::Round(FrameKind::Broadcast, RoundMessage::new(h as u64, total, &global));
        for (_, s) in peers.iter_mut() {
            write_frame(s, &down)?;
        }
        let mut uplinks = Vec::with_capacity(peers.len());
        for (summary, s) in peers.iter_mut() {
            match read_frame(s)? {
                Frame::Round(FrameKind::Uplink, msg) if msg.round_index == h as u64 => {
                    uplinks.push(msg)
                }
                other => {
                    return Err(Error::ProtocolViolation(format!(
                        "unit {} answered round {h} with {:?}",
                        summary.unit_id,
                        other.kind()
                    )))
                }
            }
        }
        global = central_update(&uplinks, h)?;
        write_checkpoint(&cfg, h, &prior, &global)?;
        round_seconds.push(started.elapsed().as_secs_f64());
    }

    let done = Frame::Round(
        FrameKind::Done,
        RoundMessage::new(cfg.rounds as u64, total, &global),
    );
    for (_, s) in peers.iter_mut() {
        write_frame(s, &done)?;
    }
    Ok(ServerOutcome {
        global,
        unit_ids: summaries.iter().map(|s| s.unit_id).collect(),
        round_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(id: u32, lo: f64, hi: f64) -> InputSummary {
        InputSummary {
            unit_id: id,
            count: 10,
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    #[test]
    fn grid_spans_union_of_ranges() {
        let prior = PriorHypers {
            num_latents: 3,
            num_inducing: 5,
            ..PriorHypers::default()
        };
        let g = init_global(
            &[summary(0, -5.0, 0.0), summary(1, 0.0, 5.0)],
            &prior,
            ModelKind::SpikeSlab,
        )
        .unwrap();
        let z = g.latents[0].inducing.points();
        assert_eq!(z[(0, 0)], -5.0);
        assert_eq!(z[(4, 0)], 5.0);
        assert_eq!(g.gamma(), vec![0.5; 3]);
        let ells: Vec<f64> = g.latents.iter().map(|l| l.kernel.lengthscale()).collect();
        assert!((ells[0] - 0.5).abs() < 1e-12 && (ells[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn lattice_points_are_distinct() {
        let z = inducing_grid(&[0.0, -1.0], &[1.0, 1.0], 7);
        assert!(InducingSet::new(z).is_ok());
    }

    #[test]
    fn central_update_needs_a_live_unit() {
        let prior = PriorHypers {
            num_latents: 1,
            num_inducing: 2,
            ..PriorHypers::default()
        };
        let g = init_global(&[summary(0, 0.0, 1.0)], &prior, ModelKind::Dense).unwrap();
        let dead = RoundMessage::new(3, 0.0, &g);
        assert!(matches!(
            central_update(std::slice::from_ref(&dead), 3),
            Err(Error::AllUnitsFailed(3))
        ));
        let live = RoundMessage::new(3, 5.0, &g);
        assert_eq!(central_update(&[dead, live], 3).unwrap(), g);
    }
}
