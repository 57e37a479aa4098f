//! Baseline / Opt / PFR sweeps over the number of sensitive features and the
//! failure probability, plus the bundled synthetic dataset.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coreset::{check_delta, opt_min_core, CoreSetResult, GridParams};
use crate::data_io::{pick_sensitive, split, AuditRecord, Dataset};
use crate::error::{Error, Result};
use crate::gaussian::GaussianPrior;
use crate::models::{train_logistic, train_mlp, LogisticConfig, MlpConfig, Model, ModelKind};
use crate::pfr::{Engine, PfrConfig, PfrOutcome};
use crate::seed;

pub const SYNTH_SAMPLES: usize = 2000;
pub const SYNTH_FEATURES: usize = 8;
pub const SYNTH_CORRELATION: f64 = 0.3;
pub const SYNTH_LABEL_NOISE: f64 = 0.05;
pub const SYNTH_TEACHER: [f64; SYNTH_FEATURES] = [1.0, -0.6, 0.36, -0.216, 0.13, -0.078, 0.047, -0.028];
pub const SYNTH_TEACHER_BIAS: f64 = 0.1;

/// Joint Gaussian features (unit variance, equal pairwise correlation),
/// labels from a fixed linear teacher with a fraction flipped.
pub fn synthetic_dataset(seed_: u64) -> Dataset {
    let d = SYNTH_FEATURES;
    let cov = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { SYNTH_CORRELATION });
    let l = cov.cholesky().expect("equicorrelation matrix is positive definite").unpack();
    let mut rng = seed::rng(seed_);
    let mut raw = Vec::with_capacity(SYNTH_SAMPLES);
    let mut labels = Vec::with_capacity(SYNTH_SAMPLES);
    for _ in 0..SYNTH_SAMPLES {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &l * z;
        let s: f64 = x.iter().zip(SYNTH_TEACHER).map(|(a, b)| a * b).sum::<f64>() + SYNTH_TEACHER_BIAS;
        let mut y = usize::from(s >= 0.0);
        if rng.random::<f64>() < SYNTH_LABEL_NOISE {
            y = 1 - y;
        }
        raw.push(x.iter().copied().collect());
        labels.push(y);
    }
    Dataset::from_raw(
        (0..d).map(|i| format!("x{i}")).collect(),
        raw,
        labels,
        vec!["0".into(), "1".into()],
        None,
    )
    .expect("synthetic dataset is well formed")
}

/// Sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub s_sizes: Vec<usize>,
    pub deltas: Vec<f64>,
    pub repetitions: usize,
    pub model: ModelKind,
    pub seed: u64,
    pub train_fraction: f64,
    /// Posterior draws per scored feature.
    pub n_samples: usize,
    pub grid: GridParams,
    /// Opt runs only when `|S|` is at most this.
    pub opt_cap: usize,
    /// Use only the first `max_test` test rows of each split.
    pub max_test: Option<usize>,
    pub logistic: LogisticConfig,
    pub mlp: MlpConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            s_sizes: (2..=7).collect(),
            deltas: vec![0.0, 0.01, 0.05, 0.1],
            repetitions: 100,
            model: ModelKind::Linear,
            seed: 0,
            train_fraction: 0.7,
            n_samples: 1000,
            grid: GridParams::default(),
            opt_cap: 12,
            max_test: None,
            logistic: LogisticConfig::default(),
            mlp: MlpConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.s_sizes.is_empty() || self.deltas.is_empty() {
            return Err(Error::Config("s_sizes and deltas must be non-empty".into()));
        }
        if let Some(&s) = self.s_sizes.iter().find(|&&s| s == 0 || s > dim) {
            return Err(Error::Config(format!("|S| = {s} outside [1, {dim}]")));
        }
        for &d in &self.deltas {
            check_delta(d)?;
        }
        if self.max_test == Some(0) {
            return Err(Error::Config("max_test must be >= 1".into()));
        }
        Ok(())
    }

    fn pfr_config(&self, delta: f64, seed_: u64) -> PfrConfig {
        PfrConfig {
            delta,
            n_samples: self.n_samples,
            seed: seed_,
            grid: self.grid,
            ..Default::default()
        }
    }
}

/// Everything one repetition produced, per test sample.
#[derive(Clone, Debug)]
pub struct Repetition {
    pub s: usize,
    pub rep: usize,
    pub test: Dataset,
    pub model: Model,
    pub prior: GaussianPrior,
    pub baseline: Vec<usize>,
    /// Absent when `|S|` exceeds the Opt cap.
    pub opt: Option<Vec<CoreSetResult>>,
    /// One entry per configured delta, in configuration order.
    pub pfr: Vec<(f64, Vec<(AuditRecord, PfrOutcome)>)>,
    pub seconds_baseline: f64,
    pub seconds_opt: f64,
    pub seconds_pfr: Vec<f64>,
}

/// Draws the split and the sensitive set, trains, fits the prior and runs
/// every method on the test rows. The PFR seed is shared across deltas.
pub fn run_repetition(data: &Dataset, cfg: &SweepConfig, s: usize, rep: usize) -> Result<Repetition> {
    let rep_seed = seed::derive(&[cfg.seed, s as u64, rep as u64]);
    let (train, test) = split(data, cfg.train_fraction, seed::derive(&[rep_seed, 1]))?;
    let space = pick_sensitive(train.space(), s, seed::derive(&[rep_seed, 2]))?;
    let train = train.with_space(space.clone())?;
    let mut test = test.with_space(space.clone())?;
    if let Some(m) = cfg.max_test.filter(|&m| m < test.len()) {
        let idx: Vec<usize> = (0..m.max(2)).collect();
        test = test.select(&idx)?;
    }
    let model = match cfg.model {
        ModelKind::Linear => Model::Linear(train_logistic(
            &train,
            &LogisticConfig { seed: seed::derive(&[rep_seed, 3]), ..cfg.logistic.clone() },
        )?),
        ModelKind::Mlp => Model::Mlp(train_mlp(
            &train,
            &MlpConfig { seed: seed::derive(&[rep_seed, 3]), ..cfg.mlp.clone() },
        )?),
    };
    let prior = GaussianPrior::fit(train.rows())?;

    let t0 = Instant::now();
    let baseline: Vec<usize> = test.rows().iter().map(|x| model.predict(x)).collect();
    let seconds_baseline = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let opt = if s <= cfg.opt_cap {
        Some(
            test.rows()
                .par_iter()
                .map(|x| opt_min_core(&model, x, space.sensitive(), cfg.grid))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        log::warn!("skipping Opt for |S| = {s} (cap {})", cfg.opt_cap);
        None
    };
    let seconds_opt = t0.elapsed().as_secs_f64();

    let pfr_seed = seed::derive(&[rep_seed, 4]);
    let mut pfr = Vec::with_capacity(cfg.deltas.len());
    let mut seconds_pfr = Vec::with_capacity(cfg.deltas.len());
    for &delta in &cfg.deltas {
        let t0 = Instant::now();
        let engine = Engine::new(&model, &prior, &space, cfg.pfr_config(delta, pfr_seed))?;
        pfr.push((delta, engine.audit(&test)?));
        seconds_pfr.push(t0.elapsed().as_secs_f64());
    }
    Ok(Repetition {
        s,
        rep,
        test,
        model,
        prior,
        baseline,
        opt,
        pfr,
        seconds_baseline,
        seconds_opt,
        seconds_pfr,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMethod {
    Baseline,
    Opt,
    Pfr,
}

impl std::fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchMethod::Baseline => "baseline",
            BenchMethod::Opt => "opt",
            BenchMethod::Pfr => "pfr",
        })
    }
}

/// Aggregate for one `(|S|, delta, method)` cell. Baseline and Opt do not
/// depend on delta and carry `delta: None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub s: usize,
    pub delta: Option<f64>,
    pub method: BenchMethod,
    pub accuracy: f64,
    pub leakage: f64,
    pub leakage_fraction: f64,
    /// Mean wall-clock seconds per repetition.
    pub runtime: f64,
    /// Count of samples by number of revealed features, `0..=s`.
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub cells: Vec<Cell>,
}

impl SweepResult {
    pub fn cell(&self, s: usize, delta: Option<f64>, method: BenchMethod) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.s == s && c.delta == delta && c.method == method)
    }
}

#[derive(Clone, Debug, Default)]
struct Acc {
    correct: usize,
    leaked: usize,
    n: usize,
    seconds: f64,
    reps: usize,
    hist: Vec<usize>,
}

impl Acc {
    fn add(&mut self, s: usize, preds_leaks: impl Iterator<Item = (bool, usize)>, seconds: f64) {
        if self.hist.is_empty() {
            self.hist = vec![0; s + 1];
        }
        for (ok, leak) in preds_leaks {
            self.correct += usize::from(ok);
            self.leaked += leak;
            self.n += 1;
            self.hist[leak] += 1;
        }
        self.seconds += seconds;
        self.reps += 1;
    }

    fn merge(mut self, other: Acc) -> Acc {
        if self.hist.is_empty() {
            return other;
        }
        for (a, b) in self.hist.iter_mut().zip(&other.hist) {
            *a += b;
        }
        self.correct += other.correct;
        self.leaked += other.leaked;
        self.n += other.n;
        self.seconds += other.seconds;
        self.reps += other.reps;
        self
    }
}

type CellKey = (usize, BenchMethod, usize);

fn summarize(r: &Repetition) -> BTreeMap<CellKey, Acc> {
    let s = r.s;
    let labels = r.test.labels();
    let mut out = BTreeMap::new();
    let mut base = Acc::default();
    base.add(s, r.baseline.iter().zip(labels).map(|(p, y)| (p == y, s)), r.seconds_baseline);
    out.insert((s, BenchMethod::Baseline, 0), base);
    if let Some(opt) = &r.opt {
        let mut acc = Acc::default();
        acc.add(
            s,
            opt.iter()
                .zip(labels)
                .map(|(c, y)| (c.repr_label == Some(*y), c.revealed.len())),
            r.seconds_opt,
        );
        out.insert((s, BenchMethod::Opt, 0), acc);
    }
    for (k, ((_, recs), secs)) in r.pfr.iter().zip(&r.seconds_pfr).enumerate() {
        let mut acc = Acc::default();
        acc.add(
            s,
            recs.iter().map(|(rec, _)| (rec.repr_label == rec.true_label, rec.leakage)),
            *secs,
        );
        out.insert((s, BenchMethod::Pfr, k), acc);
    }
    out
}

/// Runs every `(|S|, repetition)` pair (in parallel) and aggregates.
pub fn run_sweep(data: &Dataset, cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate(data.dim())?;
    let jobs: Vec<(usize, usize)> = cfg
        .s_sizes
        .iter()
        .flat_map(|&s| (0..cfg.repetitions).map(move |r| (s, r)))
        .collect();
    let merged = jobs
        .par_iter()
        .map(|&(s, r)| run_repetition(data, cfg, s, r).map(|rep| summarize(&rep)))
        .try_reduce(BTreeMap::new, |mut a, b| {
            for (k, v) in b {
                let cur = a.remove(&k).unwrap_or_default();
                a.insert(k, cur.merge(v));
            }
            Ok(a)
        })?;
    let cells = merged
        .into_iter()
        .map(|((s, method, k), acc)| {
            let n = acc.n as f64;
            let leakage = acc.leaked as f64 / n;
            Cell {
                s,
                delta: (method == BenchMethod::Pfr).then(|| cfg.deltas[k]),
                method,
                accuracy: acc.correct as f64 / n,
                leakage,
                leakage_fraction: leakage / s as f64,
                runtime: acc.seconds / acc.reps as f64,
                histogram: acc.hist,
            }
        })
        .collect();
    Ok(SweepResult { config: cfg.clone(), cells })
}

/// Counts of records by leakage `0..=s` among records with the given delta.
pub fn histogram(records: &[AuditRecord], delta: f64, s: usize) -> Vec<usize> {
    let mut h = vec![0; s + 1];
    for r in records.iter().filter(|r| r.delta == delta) {
        h[r.leakage.min(s)] += 1;
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!("unknown format {other:?} (csv|jsonl)"))),
        }
    }
}

/// One row of the long-format result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub s: usize,
    pub delta: Option<f64>,
    pub method: BenchMethod,
    pub metric: String,
    pub value: f64,
}

/// One row of the histogram table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistRow {
    pub s: usize,
    pub delta: Option<f64>,
    pub method: BenchMethod,
    pub size: usize,
    pub count: usize,
}

pub const METRICS: [&str; 4] = ["accuracy", "leakage", "leakage_fraction", "runtime"];

pub fn long_rows(result: &SweepResult) -> Vec<LongRow> {
    let mut rows = Vec::with_capacity(result.cells.len() * METRICS.len());
    for c in &result.cells {
        for (metric, value) in METRICS.iter().zip([c.accuracy, c.leakage, c.leakage_fraction, c.runtime]) {
            rows.push(LongRow {
                s: c.s,
                delta: c.delta,
                method: c.method,
                metric: metric.to_string(),
                value,
            });
        }
    }
    rows
}

pub fn hist_rows(result: &SweepResult) -> Vec<HistRow> {
    result
        .cells
        .iter()
        .flat_map(|c| {
            c.histogram.iter().enumerate().map(move |(size, &count)| HistRow {
                s: c.s,
                delta: c.delta,
                method: c.method,
                size,
                count,
            })
        })
        .collect()
}

fn write_rows<T: Serialize>(rows: &[T], format: Format, path: &Path) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Format::Jsonl => {
            let f = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(f);
            for r in rows {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(format: Format, path: &Path) -> Result<Vec<T>> {
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            r.deserialize().map(|row| row.map_err(Error::from)).collect()
        }
        Format::Jsonl => crate::data_io::read_jsonl(path),
    }
}

/// Path of the histogram table written next to `path`: `out.csv` becomes
/// `out.hist.csv`.
pub fn hist_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.hist.{}", ext.to_string_lossy()),
        None => format!("{stem}.hist"),
    };
    path.with_file_name(name)
}

/// Writes the metric table to `path` and the histogram table to
/// [`hist_path`]`(path)`.
pub fn emit(result: &SweepResult, format: Format, path: &Path) -> Result<()> {
    write_rows(&long_rows(result), format, path)?;
    write_rows(&hist_rows(result), format, &hist_path(path))
}

pub fn read_long(format: Format, path: &Path) -> Result<Vec<LongRow>> {
    read_rows(format, path)
}

pub fn read_hist(format: Format, path: &Path) -> Result<Vec<HistRow>> {
    read_rows(format, path)
}
