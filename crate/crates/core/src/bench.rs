//! Repeated synthetic experiments, new-unit evaluation and report files.
//!
//! A run index `r` uses seed `cfg.seed + r` for the scenario draw, the
//! federation and the Monte-Carlo predictor, so every repeat sees fresh data
//! and identical configs give identical metrics (timings aside).

use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{self, HeldOut, MaskSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fedrun::{run_federated, FedConfig, Transport};
use crate::objective::ModelKind;
use crate::params::{GlobalParams, PersonalParams, PriorHypers, UnitDataset};
use crate::predict::{
    igp_fit_predict, mc_predict, new_unit_fit, new_unit_predict, select_latents, IgpConfig,
    NewUnitConfig, PredictiveMoments, SelectionResult, VarianceEstimator, DEFAULT_ENERGY_THRESHOLD,
    DEFAULT_GAMMA_THRESHOLD,
};

/// Ids handed to generated new units, far from the training ids.
pub const NEW_UNIT_FIRST_ID: u32 = 1000;
const NEW_UNIT_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchModel {
    FedlmcSs,
    Fedlmc,
    Igp,
}

impl BenchModel {
    pub const ALL: [BenchModel; 3] = [BenchModel::Igp, BenchModel::Fedlmc, BenchModel::FedlmcSs];

    fn kind(self) -> Option<ModelKind> {
        match self {
            BenchModel::FedlmcSs => Some(ModelKind::SpikeSlab),
            BenchModel::Fedlmc => Some(ModelKind::Dense),
            BenchModel::Igp => None,
        }
    }
}

impl FromStr for BenchModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedlmc_ss" => Ok(BenchModel::FedlmcSs),
            "fedlmc" => Ok(BenchModel::Fedlmc),
            "igp" => Ok(BenchModel::Igp),
            _ => Err(Error::InvalidConfig(format!(
                "unknown model {s:?} (expected fedlmc_ss, fedlmc or igp)"
            ))),
        }
    }
}

impl fmt::Display for BenchModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Method::from(*self).fmt(f)
    }
}

/// What produced a metrics record: a trained model, or one of the
/// new-unit regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Igp,
    Fedlmc,
    FedlmcSs,
    /// New unit on the latents selected by `fedlmc_ss`.
    FedlmcSsSelected,
    /// New unit on every latent of `fedlmc`.
    FedlmcAll,
    /// New unit on the `|S|` largest-energy latents of `fedlmc`.
    FedlmcSelected,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Igp => "igp",
            Method::Fedlmc => "fedlmc",
            Method::FedlmcSs => "fedlmc_ss",
            Method::FedlmcSsSelected => "fedlmc_ss_selected",
            Method::FedlmcAll => "fedlmc_all",
            Method::FedlmcSelected => "fedlmc_selected",
        }
    }

    pub fn is_new_unit(self) -> bool {
        matches!(
            self,
            Method::FedlmcSsSelected | Method::FedlmcAll | Method::FedlmcSelected
        )
    }
}

impl From<BenchModel> for Method {
    fn from(m: BenchModel) -> Self {
        match m {
            BenchModel::FedlmcSs => Method::FedlmcSs,
            BenchModel::Fedlmc => Method::Fedlmc,
            BenchModel::Igp => Method::Igp,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Inproc,
    /// Loopback sockets on a free port.
    Socket,
}

impl TransportKind {
    pub fn resolve(self) -> Transport {
        match self {
            TransportKind::Inproc => Transport::InProc,
            TransportKind::Socket => Transport::Socket(([127, 0, 0, 1], 0).into()),
        }
    }
}

impl FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(TransportKind::Inproc),
            "socket" => Ok(TransportKind::Socket),
            _ => Err(Error::InvalidConfig(format!(
                "unknown transport {s:?} (expected inproc or socket)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioSource {
    /// Redrawn for every repeat; its own seed is replaced by the run seed.
    Synthetic(SyntheticSpec),
    /// The same files for every repeat; only the training seed changes.
    Csv { train: PathBuf, held_out: PathBuf },
}

/// Federation schedule used by the benchmark: short local epochs, and
/// kernel hyperparameters held at their initial ladder while the
/// coefficients and inclusion probabilities settle.
pub fn bench_fed_config() -> FedConfig {
    FedConfig {
        rounds: 1500,
        local_steps: 2,
        learning_rate: 0.03,
        kernel_warmup_rounds: 1000,
        ..FedConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSource,
    pub model: BenchModel,
    pub prior: PriorHypers,
    /// `model` and `seed` inside are overwritten per run.
    pub fed: FedConfig,
    pub igp: IgpConfig,
    pub repeats: usize,
    pub mc_samples: usize,
    pub variance_estimator: VarianceEstimator,
    pub gamma_threshold: f64,
    pub energy_threshold: f64,
    pub transport: TransportKind,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSource::Synthetic(SyntheticSpec::default()),
            model: BenchModel::FedlmcSs,
            prior: PriorHypers::default(),
            fed: bench_fed_config(),
            igp: IgpConfig::default(),
            repeats: 10,
            mc_samples: 2000,
            variance_estimator: VarianceEstimator::default(),
            gamma_threshold: DEFAULT_GAMMA_THRESHOLD,
            energy_threshold: DEFAULT_ENERGY_THRESHOLD,
            transport: TransportKind::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if !self.gamma_threshold.is_finite() || !self.energy_threshold.is_finite() {
            return bad("selection thresholds must be finite");
        }
        if let ScenarioSource::Synthetic(spec) = &self.scenario {
            spec.validate()?;
        }
        match self.model {
            BenchModel::Igp => {
                if self.igp.steps == 0 {
                    return bad("igp.steps must be at least 1");
                }
            }
            _ => {
                self.prior.validate()?;
                self.fed.validate()?;
            }
        }
        Ok(())
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    fn scenario_for(&self, run: usize) -> Result<(Vec<UnitDataset>, Vec<HeldOut>)> {
        match &self.scenario {
            ScenarioSource::Synthetic(spec) => {
                let spec = SyntheticSpec {
                    seed: self.run_seed(run),
                    ..spec.clone()
                };
                let s = data::gen_scenario(&spec)?;
                Ok((s.train, s.held_out))
            }
            ScenarioSource::Csv { train, held_out } => Ok((
                data::load_csv_path(train)?,
                data::load_held_out_csv(File::open(held_out)?)?,
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitMse {
    pub unit_id: u32,
    pub mse: f64,
}

/// Predictions at one unit's held-out inputs, kept for CSV export.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitPrediction {
    pub unit_id: u32,
    pub inputs: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub truth: DVector<f64>,
}

impl UnitPrediction {
    fn new(held: &HeldOut, pm: PredictiveMoments) -> Self {
        Self {
            unit_id: held.unit_id,
            inputs: held.inputs.clone(),
            mean: pm.mean,
            variance: pm.variance,
            truth: held.truth.clone(),
        }
    }

    fn mse(&self) -> f64 {
        if self.truth.is_empty() {
            return 0.0;
        }
        (&self.mean - &self.truth).norm_squared() / self.truth.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: Method,
    pub run: usize,
    pub seed: u64,
    pub unit_mse: Vec<UnitMse>,
    /// Mean over held-out units; `None` when the run failed or had none.
    pub mean_mse: Option<f64>,
    /// Number of latents used for prediction.
    pub selected: Option<usize>,
    pub train_seconds: f64,
    pub round_seconds: Option<f64>,
    /// Per-iteration time of new-unit fitting.
    pub step_seconds: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub predictions: Vec<UnitPrediction>,
}

impl MetricsRecord {
    fn failed(method: Method, run: usize, seed: u64, err: &Error) -> Self {
        log::warn!("{method} run {run} failed and is excluded from the summary: {err}");
        Self {
            method,
            run,
            seed,
            unit_mse: Vec::new(),
            mean_mse: None,
            selected: None,
            train_seconds: 0.0,
            round_seconds: None,
            step_seconds: None,
            error: Some(err.to_string()),
            predictions: Vec::new(),
        }
    }

    fn from_predictions(method: Method, run: usize, seed: u64, predictions: Vec<UnitPrediction>) -> Self {
        let unit_mse: Vec<UnitMse> = predictions
            .iter()
            .map(|p| UnitMse {
                unit_id: p.unit_id,
                mse: p.mse(),
            })
            .collect();
        let mean_mse = (!unit_mse.is_empty())
            .then(|| unit_mse.iter().map(|u| u.mse).sum::<f64>() / unit_mse.len() as f64);
        Self {
            method,
            run,
            seed,
            unit_mse,
            mean_mse,
            selected: None,
            train_seconds: 0.0,
            round_seconds: None,
            step_seconds: None,
            error: None,
            predictions,
        }
    }

    /// Whether the record enters the summary.
    pub fn usable(&self) -> bool {
        self.error.is_none() && self.mean_mse.is_some()
    }

    /// Equality ignoring wall-clock fields.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            train_seconds: 0.0,
            round_seconds: r.round_seconds.map(|_| 0.0),
            step_seconds: r.step_seconds.map(|_| 0.0),
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// A trained federation kept for new-unit experiments.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub run: usize,
    pub seed: u64,
    pub global: GlobalParams,
    pub personal: Vec<(u32, PersonalParams)>,
    pub selection: SelectionResult,
}

#[derive(Debug, Clone, Default)]
pub struct Experiment {
    pub records: Vec<MetricsRecord>,
    /// Successful federated runs in run order; empty for `igp`.
    pub trained: Vec<TrainedRun>,
}

/// Runs `cfg.repeats` independent repeats of one model. Configuration and
/// data-format errors abort; any other failure is recorded against its run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let method = Method::from(cfg.model);
    let mut out = Experiment::default();
    for run in 0..cfg.repeats {
        let seed = cfg.run_seed(run);
        match run_once(cfg, run, seed) {
            Ok((record, trained)) => {
                log::info!(
                    "{method} run {run}: mse {:.4}, {} latents, {:.1}s",
                    record.mean_mse.unwrap_or(f64::NAN),
                    record.selected.map_or("-".to_string(), |s| s.to_string()),
                    record.train_seconds
                );
                out.records.push(record);
                out.trained.extend(trained);
            }
            Err(e) if e.exit_code() == 2 => return Err(e),
            Err(e) => out.records.push(MetricsRecord::failed(method, run, seed, &e)),
        }
    }
    Ok(out)
}

fn run_once(cfg: &ExperimentConfig, run: usize, seed: u64) -> Result<(MetricsRecord, Option<TrainedRun>)> {
    let (train, held_out) = cfg.scenario_for(run)?;
    let method = Method::from(cfg.model);
    let Some(kind) = cfg.model.kind() else {
        let started = Instant::now();
        let predictions = held_out
            .iter()
            .map(|h| {
                let unit = find_unit(&train, h.unit_id)?;
                let (pm, _) = igp_fit_predict(unit, &h.inputs, &cfg.igp)?;
                Ok(UnitPrediction::new(h, pm))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut record = MetricsRecord::from_predictions(method, run, seed, predictions);
        record.train_seconds = started.elapsed().as_secs_f64();
        return Ok((record, None));
    };

    let fed = FedConfig {
        model: kind,
        seed,
        ..cfg.fed.clone()
    };
    let started = Instant::now();
    let fit = run_federated(&train, &cfg.prior, &fed, cfg.transport.resolve())?;
    let train_seconds = started.elapsed().as_secs_f64();
    let personal: Vec<PersonalParams> = fit.personal.iter().map(|(_, p)| p.clone()).collect();
    let selection = select_latents(&fit.global, &personal, cfg.gamma_threshold, cfg.energy_threshold);

    let predictions = held_out
        .iter()
        .map(|h| {
            let p = fit.personal_for(h.unit_id).ok_or_else(|| {
                Error::InvalidDataset(format!("held-out unit {} has no training data", h.unit_id))
            })?;
            let mc_seed = seed ^ (u64::from(h.unit_id) << 40);
            let pm = mc_predict(&fit.global, p, &h.inputs, cfg.mc_samples, mc_seed, cfg.variance_estimator)?;
            Ok(UnitPrediction::new(h, pm))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut record = MetricsRecord::from_predictions(method, run, seed, predictions);
    record.selected = Some(selection.count());
    record.train_seconds = train_seconds;
    let rounds = &fit.log.rounds;
    record.round_seconds = (!rounds.is_empty())
        .then(|| rounds.iter().map(|r| r.wall_seconds).sum::<f64>() / rounds.len() as f64);
    let trained = TrainedRun {
        run,
        seed,
        global: fit.global,
        personal: fit.personal,
        selection,
    };
    Ok((record, Some(trained)))
}

fn find_unit(train: &[UnitDataset], unit_id: u32) -> Result<&UnitDataset> {
    train
        .iter()
        .find(|u| u.unit_id == unit_id)
        .ok_or_else(|| Error::InvalidDataset(format!("held-out unit {unit_id} has no training data")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewUnitExperimentConfig {
    /// Domain, grid and noise of the new curves.
    pub base: SyntheticSpec,
    pub num_units: usize,
    pub mask_length: f64,
    pub fit: NewUnitConfig,
}

impl Default for NewUnitExperimentConfig {
    fn default() -> Self {
        Self {
            base: SyntheticSpec::default(),
            num_units: 10,
            mask_length: 2.0,
            fit: NewUnitConfig {
                steps: 500,
                adam: bench_fed_config().adam(),
            },
        }
    }
}

impl NewUnitExperimentConfig {
    fn spec_for(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_units: self.num_units,
            first_unit_id: NEW_UNIT_FIRST_ID,
            missing: (0..self.num_units as u32)
                .map(|k| MaskSpec {
                    unit_id: NEW_UNIT_FIRST_ID + k,
                    length: self.mask_length,
                })
                .collect(),
            seed: seed.wrapping_add(NEW_UNIT_SEED_OFFSET),
            ..self.base.clone()
        }
    }
}

const REGIMES: [Method; 3] = [Method::FedlmcSsSelected, Method::FedlmcAll, Method::FedlmcSelected];

/// Onboards fresh units against each pair of trained runs sharing a run
/// index. The three regimes are fitted unit by unit in rotating order so
/// that timing drift spreads evenly over them.
pub fn run_new_unit_experiment(
    cfg: &NewUnitExperimentConfig,
    spike_slab: &[TrainedRun],
    dense: &[TrainedRun],
) -> Result<Vec<MetricsRecord>> {
    if cfg.num_units == 0 {
        return Ok(Vec::new());
    }
    if cfg.fit.steps == 0 {
        return Err(Error::InvalidConfig("new-unit fitting needs at least one step".into()));
    }
    let mut records = Vec::new();
    for ss in spike_slab {
        let Some(dn) = dense.iter().find(|d| d.run == ss.run) else {
            log::warn!("no fedlmc run {} to pair with; skipping", ss.run);
            continue;
        };
        let scenario = data::gen_scenario(&cfg.spec_for(ss.seed))?;
        let k = ss.selection.count();
        let globals: [Result<GlobalParams>; 3] = [
            if ss.selection.empty {
                Err(Error::InvalidConfig("fedlmc_ss selected no latents".into()))
            } else {
                ss.global.restrict(&ss.selection.selected)
            },
            Ok(dn.global.clone()),
            if k == 0 {
                Err(Error::InvalidConfig("fedlmc_ss selected no latents".into()))
            } else {
                dn.global.restrict(&dn.selection.top_by_energy(k))
            },
        ];
        let mut preds: [Vec<UnitPrediction>; 3] = Default::default();
        let mut seconds = [0.0; 3];
        let mut steps = [0usize; 3];
        let mut errors: [Option<Error>; 3] = Default::default();
        for (i, unit) in scenario.train.iter().enumerate() {
            let Some(held) = scenario.held_out_for(unit.unit_id) else {
                continue;
            };
            for j in 0..3 {
                let r = (i + j) % 3;
                let Ok(global) = &globals[r] else { continue };
                if errors[r].is_some() {
                    continue;
                }
                let outcome = new_unit_fit(global, unit, &cfg.fit).and_then(|fit| {
                    let pm = new_unit_predict(global, &fit.w, fit.log_noise, &held.inputs)?;
                    Ok((fit, pm))
                });
                match outcome {
                    Ok((fit, pm)) => {
                        seconds[r] += fit.seconds;
                        steps[r] += fit.steps;
                        preds[r].push(UnitPrediction::new(held, pm));
                    }
                    Err(e) => errors[r] = Some(e),
                }
            }
        }
        for (r, method) in REGIMES.into_iter().enumerate() {
            let failure = match &globals[r] {
                Err(e) => Some(e),
                Ok(_) => errors[r].as_ref(),
            };
            if let Some(e) = failure {
                records.push(MetricsRecord::failed(method, ss.run, ss.seed, e));
                continue;
            }
            let mut record =
                MetricsRecord::from_predictions(method, ss.run, ss.seed, std::mem::take(&mut preds[r]));
            record.selected = globals[r].as_ref().ok().map(|g| g.num_latents());
            record.train_seconds = seconds[r];
            record.step_seconds = (steps[r] > 0).then(|| seconds[r] / steps[r] as f64);
            records.push(record);
        }
    }
    Ok(records)
}

/// Every requested model, then the new-unit regimes when both federated
/// models were run.
pub fn run_benchmark(
    cfg: &ExperimentConfig,
    models: &[BenchModel],
    new_units: Option<&NewUnitExperimentConfig>,
) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    let mut ss = Vec::new();
    let mut dense = Vec::new();
    for &model in models {
        let exp = run_experiment(&ExperimentConfig {
            model,
            ..cfg.clone()
        })?;
        records.extend(exp.records);
        match model {
            BenchModel::FedlmcSs => ss = exp.trained,
            BenchModel::Fedlmc => dense = exp.trained,
            BenchModel::Igp => {}
        }
    }
    if let Some(nu) = new_units {
        if !ss.is_empty() && !dense.is_empty() {
            records.extend(run_new_unit_experiment(nu, &ss, &dense)?);
        }
    }
    Ok(records)
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub latents_mean: Option<f64>,
    pub latents_std: Option<f64>,
    pub step_seconds_mean: Option<f64>,
}

/// One row per method present in `records`, ordered by method.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut methods: Vec<Method> = records.iter().map(|r| r.method).collect();
    methods.sort_unstable();
    methods.dedup();
    methods
        .into_iter()
        .map(|method| {
            let all: Vec<&MetricsRecord> = records.iter().filter(|r| r.method == method).collect();
            let ok: Vec<&MetricsRecord> = all.iter().copied().filter(|r| r.usable()).collect();
            let mses: Vec<f64> = ok.iter().filter_map(|r| r.mean_mse).collect();
            let latents: Vec<f64> = ok.iter().filter_map(|r| r.selected.map(|s| s as f64)).collect();
            let steps: Vec<f64> = ok.iter().filter_map(|r| r.step_seconds).collect();
            let (mse_mean, mse_std) = if mses.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&mses) };
            let lat = (!latents.is_empty()).then(|| mean_std(&latents));
            SummaryRow {
                method,
                runs: ok.len(),
                failed: all.len() - ok.len(),
                mse_mean,
                mse_std,
                latents_mean: lat.map(|l| l.0),
                latents_std: lat.map(|l| l.1),
                step_seconds_mean: (!steps.is_empty()).then(|| mean_std(&steps).0),
            }
        })
        .collect()
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.md";
pub const TIMING_FILE: &str = "timing.md";
pub const PREDICTIONS_DIR: &str = "predictions";

fn mean_pm(mean: f64, std: f64, digits: usize) -> String {
    if mean.is_finite() {
        format!("{mean:.digits$} ± {std:.4}")
    } else {
        "-".to_string()
    }
}

fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| model | runs | failed | mean MSE ± std | # latents ± std |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    let trained: Vec<&SummaryRow> = rows.iter().filter(|r| !r.method.is_new_unit()).collect();
    if !trained.is_empty() {
        for name in ["lmc", "lmc_ss"] {
            let _ = writeln!(s, "| {name} | - | - | not reproduced | not reproduced |");
        }
    }
    let line = |s: &mut String, r: &SummaryRow| {
        let latents = match (r.latents_mean, r.latents_std) {
            (Some(m), Some(sd)) => mean_pm(m, sd, 1),
            _ => "-".to_string(),
        };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {latents} |",
            r.method,
            r.runs,
            r.failed,
            mean_pm(r.mse_mean, r.mse_std, 4)
        );
    };
    for r in trained {
        line(&mut s, r);
    }
    let fresh: Vec<&SummaryRow> = rows.iter().filter(|r| r.method.is_new_unit()).collect();
    if !fresh.is_empty() {
        let _ = writeln!(s, "\n| new-unit regime | runs | failed | mean MSE ± std | # latents ± std |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for r in fresh {
            line(&mut s, r);
        }
    }
    s
}

fn timing_table(records: &[MetricsRecord]) -> String {
    let mut s = String::from("| model | run | train seconds | seconds per round | seconds per iteration |\n|---|---|---|---|---|\n");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    for r in records.iter().filter(|r| r.usable()) {
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {} | {} |",
            r.method,
            r.run,
            r.train_seconds,
            opt(r.round_seconds),
            opt(r.step_seconds)
        );
    }
    s
}

/// Writes `metrics.jsonl`, `summary.md`, `timing.md` and one prediction CSV
/// per record and held-out unit under `predictions/`. Everything except
/// `timing.md` is a pure function of the non-timing fields.
pub fn emit_report(records: &[MetricsRecord], output_dir: &Path) -> Result<()> {
    fs::create_dir_all(output_dir)?;
    let mut metrics = BufWriter::new(File::create(output_dir.join(METRICS_FILE))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writeln!(metrics, "{line}")?;
    }
    metrics.flush()?;
    fs::write(output_dir.join(SUMMARY_FILE), summary_table(&summarize(records)))?;
    fs::write(output_dir.join(TIMING_FILE), timing_table(records))?;

    let pred_dir = output_dir.join(PREDICTIONS_DIR);
    if records.iter().any(|r| !r.predictions.is_empty()) {
        fs::create_dir_all(&pred_dir)?;
    }
    for r in records {
        for p in &r.predictions {
            let name = format!("{}_run{:02}_unit{}.csv", r.method, r.run, p.unit_id);
            let pm = PredictiveMoments {
                mean: p.mean.clone(),
                variance: p.variance.clone(),
            };
            let mut out = BufWriter::new(File::create(pred_dir.join(name))?);
            pm.write_csv(&p.inputs, Some(&p.truth), &mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}
