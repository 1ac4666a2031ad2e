use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedmgp::bench::{
    bench_fed_config, emit_report, run_benchmark, BenchModel, ExperimentConfig, NewUnitExperimentConfig,
    ScenarioSource, TransportKind, SUMMARY_FILE,
};
use fedmgp::data::{self, HeldOut, MaskSpec, SyntheticSpec};
use fedmgp::error::{Error, Result};
use fedmgp::fedrun::{self, BatchSize, FedConfig};
use fedmgp::objective::ModelKind;
use fedmgp::params::{Checkpoint, PersonalParams, PriorHypers, UnitDataset};
use fedmgp::predict::{self, NewUnitConfig, VarianceEstimator};

const GLOBAL_FILE: &str = "global.ckpt";
const PERSONAL_FILE: &str = "personal.json";
const SELECTION_FILE: &str = "selection.csv";
const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser)]
#[command(name = "fedmgp", version, about = "Federated multi-output GP regression with latent selection")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    output_dir: PathBuf,
    #[arg(long, global = true, default_value = "inproc", value_parser = parse_transport)]
    transport: TransportKind,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic scenario into the output directory.
    Gen(GenArgs),
    /// Train a federation over every unit of a CSV file or scenario directory.
    Train(TrainArgs),
    /// Predict one trained unit and write the selection report.
    Predict(PredictArgs),
    /// Fit a unit that did not take part in training and predict it.
    Newunit(NewUnitArgs),
    /// Repeated experiments with summary tables.
    Bench(BenchArgs),
    /// Coordinate a socket federation.
    Serve(ServeArgs),
    /// Take part in a socket federation as one unit.
    Join(JoinArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    units: usize,
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
    hi: f64,
    /// Units with a masked range; repeat the flag for several.
    #[arg(long = "mask-unit", default_values_t = [0u32])]
    mask_units: Vec<u32>,
    #[arg(long, default_value_t = 3.0)]
    mask_length: f64,
}

#[derive(Args, Clone)]
struct PriorArgs {
    #[arg(long, default_value_t = 10)]
    latents: usize,
    #[arg(long, default_value_t = 20)]
    inducing: usize,
    #[arg(long, default_value_t = 0.5)]
    pi: f64,
    #[arg(long, default_value_t = 1.0)]
    slab_variance: f64,
}

impl PriorArgs {
    fn prior(&self) -> PriorHypers {
        PriorHypers {
            pi: self.pi,
            slab_variance: self.slab_variance,
            num_latents: self.latents,
            num_inducing: self.inducing,
        }
    }
}

/// Unset flags fall back to the benchmark schedule.
#[derive(Args, Clone)]
struct FedArgs {
    /// fedlmc_ss or fedlmc
    #[arg(long, default_value = "fedlmc_ss", value_parser = parse_kind)]
    model: ModelKind,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Rows per minibatch, or "full".
    #[arg(long)]
    batch_size: Option<BatchSize>,
    #[arg(long)]
    kernel_warmup_rounds: Option<usize>,
    #[arg(long)]
    train_inducing: bool,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl FedArgs {
    fn config(&self, seed: u64) -> FedConfig {
        let base = bench_fed_config();
        FedConfig {
            model: self.model,
            rounds: self.rounds.unwrap_or(base.rounds),
            local_steps: self.local_steps.unwrap_or(base.local_steps),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            kernel_warmup_rounds: self.kernel_warmup_rounds.unwrap_or(base.kernel_warmup_rounds),
            train_inducing: self.train_inducing,
            checkpoint_every: self.checkpoint_every,
            seed,
            ..base
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training CSV or a directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    fed: FedArgs,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long, default_value_t = predict::DEFAULT_GAMMA_THRESHOLD)]
    gamma_threshold: f64,
    #[arg(long, default_value_t = predict::DEFAULT_ENERGY_THRESHOLD)]
    energy_threshold: f64,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory written by `train`.
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long)]
    unit: u32,
    /// CSV of test inputs in the training layout; the y column is taken as truth.
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value = "total_variance", value_parser = parse_estimator)]
    variance: VarianceEstimator,
    #[command(flatten)]
    select: SelectArgs,
}

#[derive(Args)]
struct NewUnitArgs {
    #[arg(long)]
    model_dir: PathBuf,
    /// The new unit's observations (one unit).
    #[arg(long)]
    data: PathBuf,
    /// CSV of test inputs; the y column is taken as truth.
    #[arg(long)]
    inputs: PathBuf,
    /// Use every latent instead of the selected ones.
    #[arg(long)]
    all_latents: bool,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[command(flatten)]
    select: SelectArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON ExperimentConfig; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated subset of igp,fedlmc,fedlmc_ss.
    #[arg(long, value_delimiter = ',', value_parser = parse_model)]
    models: Vec<BenchModel>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    kernel_warmup_rounds: Option<usize>,
    #[arg(long)]
    latents: Option<usize>,
    #[arg(long)]
    pi: Option<f64>,
    /// New units per repeat; 0 skips the new-unit experiment.
    #[arg(long, default_value_t = 10)]
    new_units: usize,
    #[arg(long, default_value_t = 2.0)]
    new_unit_mask_length: f64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: String,
    #[arg(long)]
    units: usize,
    #[command(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    fed: FedArgs,
}

#[derive(Args)]
struct JoinArgs {
    #[arg(long)]
    server: SocketAddr,
    /// CSV holding this unit's rows (other units' rows are ignored).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    unit: u32,
    #[command(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    fed: FedArgs,
}

fn parse_transport(s: &str) -> std::result::Result<TransportKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_model(s: &str) -> std::result::Result<BenchModel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    match s {
        "fedlmc_ss" => Ok(ModelKind::SpikeSlab),
        "fedlmc" => Ok(ModelKind::Dense),
        _ => Err(format!("unknown model {s:?} (expected fedlmc_ss or fedlmc)")),
    }
}

fn parse_estimator(s: &str) -> std::result::Result<VarianceEstimator, String> {
    match s {
        "total_variance" => Ok(VarianceEstimator::TotalVariance),
        "literal" => Ok(VarianceEstimator::Literal),
        _ => Err(format!("unknown estimator {s:?} (expected total_variance or literal)")),
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::InvalidConfig(e.to_string())
}

fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::InvalidConfig(format!("{} does not exist", path.display())))
    }
}

fn load_units(path: &Path) -> Result<Vec<UnitDataset>> {
    if existing(path)?.is_dir() {
        Ok(data::load_scenario(path)?.train)
    } else {
        data::load_csv_path(path)
    }
}

fn load_test_points(path: &Path) -> Result<HeldOut> {
    let mut held = data::load_held_out_csv(File::open(existing(path)?)?)?;
    match held.len() {
        1 => Ok(held.remove(0)),
        n => Err(Error::InvalidDataset(format!(
            "{} must hold exactly one unit, found {n}",
            path.display()
        ))),
    }
}

fn load_model(dir: &Path) -> Result<(Checkpoint, BTreeMap<u32, PersonalParams>)> {
    let ckpt = Checkpoint::read(existing(&dir.join(GLOBAL_FILE))?)?;
    let text = fs::read_to_string(dir.join(PERSONAL_FILE))?;
    let personal = serde_json::from_str(&text).map_err(json_err)?;
    Ok((ckpt, personal))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).map_err(json_err)?)?;
    Ok(())
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_units: a.units,
        points_per_unit: a.points,
        domain: (a.lo, a.hi),
        noise_std: a.noise,
        missing: a
            .mask_units
            .iter()
            .map(|&unit_id| MaskSpec {
                unit_id,
                length: a.mask_length,
            })
            .collect(),
        seed: cli.seed,
        first_unit_id: 0,
    };
    let scenario = data::gen_scenario(&spec)?;
    data::save_scenario(&scenario, &cli.output_dir)?;
    println!(
        "wrote {} units to {}",
        scenario.train.len(),
        cli.output_dir.display()
    );
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let units = load_units(&a.data)?;
    let prior = a.prior.prior();
    let mut cfg = a.fed.config(cli.seed);
    if cfg.checkpoint_every.is_some() {
        cfg.checkpoint_dir = Some(cli.output_dir.join("checkpoints"));
    }
    let fit = fedrun::run_federated(&units, &prior, &cfg, cli.transport.resolve())?;
    fs::create_dir_all(&cli.output_dir)?;
    Checkpoint {
        round_index: cfg.rounds as u64,
        prior,
        global: fit.global.clone(),
    }
    .write(&cli.output_dir.join(GLOBAL_FILE))?;
    let personal: BTreeMap<u32, PersonalParams> = fit.personal.iter().cloned().collect();
    write_json(&cli.output_dir.join(PERSONAL_FILE), &personal)?;
    fit.log.save(&cli.output_dir.join(TRAIN_LOG_FILE))?;
    let all: Vec<PersonalParams> = personal.into_values().collect();
    let sel = predict::select_latents(
        &fit.global,
        &all,
        predict::DEFAULT_GAMMA_THRESHOLD,
        predict::DEFAULT_ENERGY_THRESHOLD,
    );
    sel.write_csv(File::create(cli.output_dir.join(SELECTION_FILE))?)?;
    let last = fit.log.rounds.last().map_or(f64::NAN, |r| r.aggregated);
    println!(
        "trained {} units for {} rounds; objective {last:.3}; {} latents selected",
        units.len(),
        cfg.rounds,
        sel.count()
    );
    Ok(())
}

fn predict_cmd(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let (ckpt, personal) = load_model(&a.model_dir)?;
    let p = personal
        .get(&a.unit)
        .ok_or_else(|| Error::InvalidConfig(format!("unit {} is not in the model", a.unit)))?;
    let test = load_test_points(&a.inputs)?;
    let pm = predict::mc_predict(&ckpt.global, p, &test.inputs, a.samples, cli.seed, a.variance)?;
    let all: Vec<PersonalParams> = personal.values().cloned().collect();
    let sel = predict::select_latents(&ckpt.global, &all, a.select.gamma_threshold, a.select.energy_threshold);
    fs::create_dir_all(&cli.output_dir)?;
    pm.write_csv(
        &test.inputs,
        Some(&test.truth),
        BufWriter::new(File::create(cli.output_dir.join(format!("predict_unit{}.csv", a.unit)))?),
    )?;
    sel.write_csv(File::create(cli.output_dir.join(SELECTION_FILE))?)?;
    println!("unit {}: mse {:.6}; {} latents selected", a.unit, pm.mse(&test.truth), sel.count());
    Ok(())
}

fn newunit(cli: &Cli, a: &NewUnitArgs) -> Result<()> {
    let (ckpt, personal) = load_model(&a.model_dir)?;
    let mut units = data::load_csv_path(&a.data)?;
    if units.len() != 1 {
        return Err(Error::InvalidDataset(format!(
            "{} must hold exactly one unit, found {}",
            a.data.display(),
            units.len()
        )));
    }
    let unit = units.remove(0);
    let global = if a.all_latents {
        ckpt.global
    } else {
        let all: Vec<PersonalParams> = personal.into_values().collect();
        let sel = predict::select_latents(&ckpt.global, &all, a.select.gamma_threshold, a.select.energy_threshold);
        if sel.empty {
            return Err(Error::InvalidConfig("no latents selected; rerun with --all-latents".into()));
        }
        ckpt.global.restrict(&sel.selected)?
    };
    let defaults = NewUnitConfig::default();
    let cfg = NewUnitConfig {
        steps: a.steps,
        adam: fedmgp::optim::AdamConfig {
            learning_rate: a.learning_rate.unwrap_or(bench_fed_config().learning_rate),
            ..defaults.adam
        },
    };
    let fit = predict::new_unit_fit(&global, &unit, &cfg)?;
    let test = load_test_points(&a.inputs)?;
    let pm = predict::new_unit_predict(&global, &fit.w, fit.log_noise, &test.inputs)?;
    fs::create_dir_all(&cli.output_dir)?;
    pm.write_csv(
        &test.inputs,
        Some(&test.truth),
        BufWriter::new(File::create(cli.output_dir.join(format!("newunit_{}.csv", unit.unit_id)))?),
    )?;
    println!(
        "new unit {}: {} latents, noise {:.4}, mse {:.6}, {:.3e}s per iteration",
        unit.unit_id,
        global.num_latents(),
        fit.noise(),
        pm.mse(&test.truth),
        fit.seconds_per_step()
    );
    Ok(())
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?).map_err(json_err)?,
        None => ExperimentConfig::default(),
    };
    cfg.seed = cli.seed;
    cfg.transport = cli.transport;
    cfg.output_dir = Some(cli.output_dir.clone());
    if let Some(v) = a.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = a.mc_samples {
        cfg.mc_samples = v;
    }
    if let Some(v) = a.rounds {
        cfg.fed.rounds = v;
    }
    if let Some(v) = a.local_steps {
        cfg.fed.local_steps = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.fed.learning_rate = v;
    }
    if let Some(v) = a.kernel_warmup_rounds {
        cfg.fed.kernel_warmup_rounds = v;
    }
    if let Some(v) = a.latents {
        cfg.prior.num_latents = v;
    }
    if let Some(v) = a.pi {
        cfg.prior.pi = v;
    }
    let models = if a.models.is_empty() {
        BenchModel::ALL.to_vec()
    } else {
        a.models.clone()
    };
    let base = match &cfg.scenario {
        ScenarioSource::Synthetic(spec) => spec.clone(),
        ScenarioSource::Csv { .. } => SyntheticSpec::default(),
    };
    let new_units = NewUnitExperimentConfig {
        base,
        num_units: a.new_units,
        mask_length: a.new_unit_mask_length,
        fit: NewUnitConfig {
            steps: NewUnitExperimentConfig::default().fit.steps,
            adam: cfg.fed.adam(),
        },
    };
    let records = run_benchmark(&cfg, &models, Some(&new_units))?;
    emit_report(&records, &cli.output_dir)?;
    print!("{}", fs::read_to_string(cli.output_dir.join(SUMMARY_FILE))?);
    Ok(())
}

fn serve(cli: &Cli, a: &ServeArgs) -> Result<()> {
    let prior = a.prior.prior();
    let cfg = a.fed.config(cli.seed);
    let handle = fedrun::serve(&a.bind, prior, cfg.clone(), a.units)?;
    println!("serving on {} for {} units", handle.local_addr(), a.units);
    let outcome = handle.wait()?;
    fs::create_dir_all(&cli.output_dir)?;
    Checkpoint {
        round_index: cfg.rounds as u64,
        prior,
        global: outcome.global,
    }
    .write(&cli.output_dir.join(GLOBAL_FILE))?;
    println!("finished {} rounds with units {:?}", outcome.round_seconds.len(), outcome.unit_ids);
    Ok(())
}

fn join(cli: &Cli, a: &JoinArgs) -> Result<()> {
    let unit = load_units(&a.data)?
        .into_iter()
        .find(|u| u.unit_id == a.unit)
        .ok_or_else(|| Error::InvalidDataset(format!("no rows for unit {}", a.unit)))?;
    let outcome = fedrun::join(a.server, unit, a.prior.prior(), a.fed.config(cli.seed))?.wait()?;
    fs::create_dir_all(&cli.output_dir)?;
    write_json(
        &cli.output_dir.join(format!("personal_{}.json", outcome.unit_id)),
        &outcome.personal,
    )?;
    println!("unit {} done after {} rounds", outcome.unit_id, outcome.records.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => gen(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Predict(a) => predict_cmd(&cli, a),
        Command::Newunit(a) => newunit(&cli, a),
        Command::Bench(a) => bench(&cli, a),
        Command::Serve(a) => serve(&cli, a),
        Command::Join(a) => join(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
