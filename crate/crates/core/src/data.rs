//! Synthetic multi-unit curves with masked ranges, and CSV ingestion.
//!
//! CSV layout: a header `unit_id,x1,...,xd,y` followed by one row per
//! observation. Rows of the same unit need not be contiguous; units come
//! back in order of first appearance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::chol_jittered;
use crate::params::UnitDataset;

/// Diagonal added to the generator covariance before factorizing.
pub const GENERATOR_JITTER: f64 = 1e-8;

/// `exp(-(x^2 + x2^2)/10) * (cos d + cos 2d + cos 3d)` with `d = x - x2`.
/// Six eigenfunctions, so the covariance has rank six.
pub fn scenario_covariance(x: f64, x2: f64) -> f64 {
    let d = x - x2;
    (-(x * x + x2 * x2) / 10.0).exp() * (d.cos() + (2.0 * d).cos() + (3.0 * d).cos())
}

/// A contiguous input range hidden from one unit's training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub unit_id: u32,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_units: usize,
    pub points_per_unit: usize,
    pub domain: (f64, f64),
    pub noise_std: f64,
    pub missing: Vec<MaskSpec>,
    pub seed: u64,
    /// Id given to the first generated unit; the rest follow consecutively.
    pub first_unit_id: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_units: 10,
            points_per_unit: 100,
            domain: (-5.0, 5.0),
            noise_std: 0.2,
            missing: vec![MaskSpec {
                unit_id: 0,
                length: 3.0,
            }],
            seed: 0,
            first_unit_id: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.domain;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return bad(format!("domain ({lo}, {hi}) is empty"));
        }
        if self.num_units == 0 || self.points_per_unit == 0 {
            return bad("need at least one unit and one point".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        let ids = self.first_unit_id..self.first_unit_id + self.num_units as u32;
        for m in &self.missing {
            if !(m.length > 0.0 && m.length < hi - lo) {
                return bad(format!("mask length {} does not fit the domain", m.length));
            }
            if !ids.contains(&m.unit_id) {
                return bad(format!("mask refers to unknown unit {}", m.unit_id));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let (lo, hi) = self.domain;
        let n = self.points_per_unit;
        if n == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Masked points of one unit with their noiseless function values.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    pub unit_id: u32,
    pub inputs: DMatrix<f64>,
    pub truth: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: SyntheticSpec,
    pub train: Vec<UnitDataset>,
    pub held_out: Vec<HeldOut>,
}

impl Scenario {
    pub fn held_out_for(&self, unit_id: u32) -> Option<&HeldOut> {
        self.held_out.iter().find(|h| h.unit_id == unit_id)
    }
}

/// Draws one independent curve per unit on the shared grid, adds noise and
/// removes the masked ranges. A pure function of `spec`.
pub fn gen_scenario(spec: &SyntheticSpec) -> Result<Scenario> {
    spec.validate()?;
    let grid = spec.grid();
    let n = grid.len();
    let mut cov = DMatrix::from_fn(n, n, |i, j| scenario_covariance(grid[i], grid[j]));
    for i in 0..n {
        cov[(i, i)] += GENERATOR_JITTER;
    }
    let l = chol_jittered(&cov, GENERATOR_JITTER)?.l();
    let (lo, hi) = spec.domain;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::with_capacity(spec.num_units);
    let mut held_out = Vec::new();
    for k in 0..spec.num_units {
        let unit_id = spec.first_unit_id + k as u32;
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = &l * z;
        let y: Vec<f64> = f
            .iter()
            .map(|v| v + spec.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let masks: Vec<(f64, f64)> = spec
            .missing
            .iter()
            .filter(|m| m.unit_id == unit_id)
            .map(|m| {
                let start = rng.random_range(lo..=hi - m.length);
                (start, start + m.length)
            })
            .collect();
        let hidden = |x: f64| masks.iter().any(|&(a, b)| x >= a && x <= b);

        let (mut xs, mut ys, mut hx, mut hy) = (vec![], vec![], vec![], vec![]);
        for i in 0..n {
            if hidden(grid[i]) {
                hx.push(grid[i]);
                hy.push(f[i]);
            } else {
                xs.push(grid[i]);
                ys.push(y[i]);
            }
        }
        train.push(UnitDataset::from_1d(unit_id, &xs, &ys)?);
        if !hx.is_empty() {
            held_out.push(HeldOut {
                unit_id,
                inputs: DMatrix::from_column_slice(hx.len(), 1, &hx),
                truth: DVector::from_vec(hy),
            });
        }
    }
    Ok(Scenario {
        spec: spec.clone(),
        train,
        held_out,
    })
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        message: message.into(),
    }
}

/// Reads `unit_id,x1..xd,y` rows grouped by unit.
pub fn load_csv(reader: impl Read) -> Result<Vec<UnitDataset>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let width = headers.len();
    if width < 3 || &headers[0] != "unit_id" || &headers[width - 1] != "y" {
        return Err(parse_err(1, "header must read unit_id,x1,...,xd,y"));
    }
    for (k, h) in headers.iter().enumerate().take(width - 1).skip(1) {
        if h != format!("x{k}") {
            return Err(parse_err(1, format!("expected column x{k}, found {h:?}")));
        }
    }
    let d = width - 2;

    let mut order: Vec<u32> = Vec::new();
    let mut rows: HashMap<u32, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(Error::InconsistentDimension {
                line: line as usize,
                expected: d,
                actual: rec.len().saturating_sub(2),
            });
        }
        let unit_id: u32 = rec[0]
            .parse()
            .map_err(|_| parse_err(line, format!("bad unit id {:?}", &rec[0])))?;
        let mut vals = Vec::with_capacity(d + 1);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value {field:?}")));
            }
            vals.push(v);
        }
        let entry = rows.entry(unit_id).or_insert_with(|| {
            order.push(unit_id);
            (Vec::new(), Vec::new())
        });
        entry.0.extend_from_slice(&vals[..d]);
        entry.1.push(vals[d]);
    }

    order
        .into_iter()
        .map(|id| {
            let (x, y) = rows.remove(&id).expect("every ordered id has rows");
            let inputs = DMatrix::from_row_slice(y.len(), d, &x);
            UnitDataset::new(id, inputs, DVector::from_vec(y))
        })
        .collect()
}

pub fn load_csv_path(path: &Path) -> Result<Vec<UnitDataset>> {
    load_csv(File::open(path)?)
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidDataset(format!("{other:?}")),
    }
}

fn write_rows<'a>(
    out: impl Write,
    d: usize,
    rows: impl Iterator<Item = (u32, &'a DMatrix<f64>, &'a DVector<f64>)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["unit_id".to_string()];
    header.extend((1..=d).map(|k| format!("x{k}")));
    header.push("y".into());
    w.write_record(&header).map_err(csv_io)?;
    for (id, x, y) in rows {
        for n in 0..y.len() {
            let mut rec = vec![id.to_string()];
            rec.extend((0..d).map(|k| x[(n, k)].to_string()));
            rec.push(y[n].to_string());
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes datasets in the CSV layout; values use the shortest decimal form
/// that parses back to the same `f64`.
pub fn save_csv(datasets: &[UnitDataset], out: impl Write) -> Result<()> {
    let d = datasets.first().map_or(1, |u| u.dim());
    write_rows(
        out,
        d,
        datasets.iter().map(|u| (u.unit_id, u.inputs(), u.outputs())),
    )
}

/// Held-out points in the same layout, with the noiseless value as `y`.
pub fn save_held_out_csv(held_out: &[HeldOut], out: impl Write) -> Result<()> {
    let d = held_out.first().map_or(1, |h| h.inputs.ncols());
    write_rows(
        out,
        d,
        held_out.iter().map(|h| (h.unit_id, &h.inputs, &h.truth)),
    )
}

pub fn load_held_out_csv(reader: impl Read) -> Result<Vec<HeldOut>> {
    Ok(load_csv(reader)?
        .into_iter()
        .map(|u| HeldOut {
            unit_id: u.unit_id,
            inputs: u.inputs().clone(),
            truth: u.outputs().clone(),
        })
        .collect())
}

/// Spec echo written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub spec: SyntheticSpec,
    pub train_rows: Vec<(u32, usize)>,
    pub held_out_rows: Vec<(u32, usize)>,
}

pub const TRAIN_FILE: &str = "train.csv";
pub const HELD_OUT_FILE: &str = "held_out.csv";
pub const MANIFEST_FILE: &str = "scenario.json";

/// Writes `train.csv`, `held_out.csv` and `scenario.json` into `dir`.
pub fn save_scenario(scenario: &Scenario, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_csv(&scenario.train, File::create(dir.join(TRAIN_FILE))?)?;
    save_held_out_csv(&scenario.held_out, File::create(dir.join(HELD_OUT_FILE))?)?;
    let manifest = ScenarioManifest {
        spec: scenario.spec.clone(),
        train_rows: scenario.train.iter().map(|u| (u.unit_id, u.len())).collect(),
        held_out_rows: scenario
            .held_out
            .iter()
            .map(|h| (h.unit_id, h.truth.len()))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidDataset(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn load_scenario(dir: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: ScenarioManifest = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", MANIFEST_FILE)))?;
    let train = load_csv_path(&dir.join(TRAIN_FILE))?;
    let held_path = dir.join(HELD_OUT_FILE);
    let held_out = if held_path.exists() {
        load_held_out_csv(File::open(held_path)?)?
    } else {
        Vec::new()
    };
    Ok(Scenario {
        spec: manifest.spec,
        train,
        held_out,
    })
}
