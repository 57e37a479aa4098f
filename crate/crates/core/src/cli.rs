//! Command-line front end. [`run`] takes explicit streams so the whole
//! surface can be driven in-process.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{self, Format, SweepConfig};
use crate::coreset::{opt_min_core, GridParams};
use crate::data_io::{
    denormalize_value, load_csv, load_csv_with, normalize_value, read_json, read_jsonl, split,
    write_csv, write_json, write_jsonl, AuditRecord, Dataset, LoadOptions, SensitiveSpec,
};
use crate::error::{Error, Result};
use crate::gaussian::GaussianPrior;
use crate::models::{
    train_logistic, train_mlp, LogisticConfig, MlpConfig, Model, ModelKind, SavedModel,
};
use crate::pfr::{leakage, Engine, PfrConfig};

pub const THREADS_ENV: &str = "MINREVEAL_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "minreveal",
    version,
    about = "Audit how many sensitive features a classifier needs to see"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the bundled synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Fit the Gaussian feature prior on a dataset.
    FitPrior(FitPriorArgs),
    /// Train a classifier on a seeded train/test split.
    Train(TrainArgs),
    /// Run feature release on every row of a dataset.
    Audit(AuditArgs),
    /// Exhaustive minimum pure core sets.
    Opt(OptArgs),
    /// Interactive single-sample session.
    Reveal(RevealArgs),
    /// Baseline / Opt / PFR sweep.
    Bench(BenchArgs),
    /// Merge audit outputs into one long-format CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Label column name.
    #[arg(long, default_value = "label")]
    pub label: String,
}

#[derive(Args, Debug, Default)]
pub struct EngineArgs {
    /// JSON engine config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Posterior draws per scored feature.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Robustness radius for the grid test.
    #[arg(long)]
    pub grid_delta: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
}

impl EngineArgs {
    fn resolve(&self, seed: u64) -> Result<PfrConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_json::<PfrConfig>(p)?,
            None => PfrConfig::default(),
        };
        cfg.seed = seed;
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(n) = self.samples {
            cfg.n_samples = n;
        }
        if let Some(g) = self.grid_delta {
            cfg.grid.delta_robust = g;
        }
        if let Some(j) = self.jitter {
            cfg.jitter = j;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitPriorArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Normalize with this model's ranges instead of the data's.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = ModelKind::Linear)]
    pub kind: ModelKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Hidden layer widths for `--kind mlp`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the prior fitted on the training split.
    #[arg(long)]
    pub prior_out: Option<PathBuf>,
    /// Also write the raw test split as CSV.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prior: PathBuf,
    /// Number of random sensitive features, or comma-separated names.
    #[arg(long)]
    pub sensitive: String,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Per-sample JSONL output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct OptArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub sensitive: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub grid_delta: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RevealArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prior: PathBuf,
    /// Public feature values as `name=value`; repeat or comma separate.
    #[arg(long, value_delimiter = ',')]
    pub public: Vec<String>,
    /// Sensitive feature names; defaults to every feature not given as public.
    #[arg(long, value_delimiter = ',')]
    pub sensitive: Option<Vec<String>>,
    /// Values are in the original units and get normalized with the model's
    /// ranges.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// CSV dataset; the bundled synthetic dataset when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    pub label: String,
    /// JSON sweep config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub kind: Option<ModelKind>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub max_test: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// csv or jsonl; inferred from the output extension when omitted.
    #[arg(long)]
    pub format: Option<Format>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Audit JSONL files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Run description written next to an audit output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditMeta {
    pub dataset: String,
    pub model: String,
    pub kind: ModelKind,
    pub sensitive: Vec<String>,
    pub config: PfrConfig,
}

pub fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// One row of the merged report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub dataset: String,
    pub model: String,
    pub delta: f64,
    pub metric: String,
    pub value: f64,
}

/// Single-feature opt result as written by `opt --out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptRecord {
    pub sample_id: usize,
    pub revealed: Vec<String>,
    pub size: usize,
    pub repr_label: usize,
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(|e| Error::io("<stdout>", e))
    };
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 success, 2 usage or configuration error, 3 runtime
/// failure.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                return 2;
            }
            let _ = write!(stdout, "{text}");
            return 0;
        }
    };
    match dispatch(cli.command, stdin, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) | Error::Diverged { .. } | Error::Oracle { .. } => 3,
        _ => 2,
    }
}

/// Runs `f` on a worker pool sized by the environment (0 or unset lets
/// rayon decide).
fn in_pool<R: Send>(f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a count, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
        .install(f)
}

fn dispatch(cmd: Command, stdin: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a, out),
        Command::FitPrior(a) => cmd_fit_prior(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Audit(a) => cmd_audit(a, out),
        Command::Opt(a) => cmd_opt(a, out),
        Command::Reveal(a) => cmd_reveal(a, stdin, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Report(a) => cmd_report(a, out),
    }
}

fn engine_header(out: &mut dyn Write, cmd: &str, cfg: &PfrConfig) -> Result<()> {
    say!(
        out,
        "# minreveal {cmd} seed={} samples={} delta={} grid_delta={} jitter={}",
        cfg.seed,
        cfg.n_samples,
        cfg.delta,
        cfg.grid.delta_robust,
        cfg.jitter
    )
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let ds = bench::synthetic_dataset(a.seed);
    write_csv(&ds, &a.out, "label")?;
    say!(out, "wrote {} rows to {}", ds.len(), a.out.display())
}

/// Loads a CSV normalized with the model's ranges and checks the columns.
fn load_for_model(data: &DataArgs, saved: &SavedModel) -> Result<Dataset> {
    let opts = LoadOptions {
        norm_params: Some(saved.norm_params.clone()),
        label_names: saved.labels.clone(),
    };
    let ds = load_csv_with(&data.data, &data.label, &opts)?;
    if let Some(names) = &saved.feature_names {
        if ds.space().names() != names.as_slice() {
            return Err(Error::Schema(format!(
                "dataset columns {:?} do not match model features {:?}",
                ds.space().names(),
                names
            )));
        }
    }
    if ds.dim() != saved.model.dim() {
        return Err(Error::Schema(format!(
            "dataset has {} features, model expects {}",
            ds.dim(),
            saved.model.dim()
        )));
    }
    Ok(ds)
}

fn cmd_fit_prior(a: FitPriorArgs, out: &mut dyn Write) -> Result<()> {
    let ds = match &a.model {
        Some(m) => load_for_model(&a.data, &SavedModel::load(m)?)?,
        None => load_csv(&a.data.data, &a.data.label)?,
    };
    let prior = GaussianPrior::fit(ds.rows())?;
    write_json(&a.out, &prior)?;
    say!(out, "fitted prior over {} features from {} rows", prior.dim(), ds.len())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let ds = load_csv(&a.data.data, &a.data.label)?;
    let (train, test) = split(&ds, a.train_fraction, a.seed)?;
    let model = match a.kind {
        ModelKind::Linear => {
            let d = LogisticConfig::default();
            let cfg = LogisticConfig {
                lr: a.lr.unwrap_or(d.lr),
                epochs: a.epochs.unwrap_or(d.epochs),
                batch: a.batch.unwrap_or(d.batch),
                seed: a.seed,
            };
            Model::Linear(train_logistic(&train, &cfg)?)
        }
        ModelKind::Mlp => {
            let d = MlpConfig::default();
            let cfg = MlpConfig {
                hidden: a.hidden.clone().unwrap_or(d.hidden),
                lr: a.lr.unwrap_or(d.lr),
                epochs: a.epochs.unwrap_or(d.epochs),
                batch: a.batch.unwrap_or(d.batch),
                seed: a.seed,
            };
            Model::Mlp(train_mlp(&train, &cfg)?)
        }
    };
    say!(out, "# minreveal train kind={} seed={} train_fraction={}", a.kind, a.seed, a.train_fraction)?;
    say!(out, "train accuracy {:.6}", model.accuracy(&train))?;
    say!(out, "test accuracy {:.6}", model.accuracy(&test))?;
    let saved = SavedModel {
        model,
        norm_params: train.space().norm_params().to_vec(),
        feature_names: Some(train.space().names().to_vec()),
        labels: Some(train.label_names().to_vec()),
    };
    saved.save(&a.out)?;
    if let Some(p) = &a.prior_out {
        write_json(p, &GaussianPrior::fit(train.rows())?)?;
    }
    if let Some(p) = &a.test_out {
        write_csv(&test, p, &a.data.label)?;
    }
    Ok(())
}

fn load_prior(path: &Path, dim: usize) -> Result<GaussianPrior> {
    let prior: GaussianPrior = read_json(path)?;
    if prior.dim() != dim {
        return Err(Error::Schema(format!(
            "prior covers {} features, model expects {dim}",
            prior.dim()
        )));
    }
    Ok(prior)
}

fn cmd_audit(a: AuditArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.engine.resolve(a.seed)?;
    let saved = SavedModel::load(&a.model)?;
    let prior = load_prior(&a.prior, saved.model.dim())?;
    let ds = load_for_model(&a.data, &saved)?;
    let space = SensitiveSpec::parse_flag(&a.sensitive, a.seed).resolve(ds.space())?;
    let ds = ds.with_space(space.clone())?;
    engine_header(out, "audit", &cfg)?;
    let engine = Engine::new(&saved.model, &prior, &space, cfg.clone())?;
    let records: Vec<AuditRecord> = in_pool(|| engine.audit(&ds))?.into_iter().map(|(r, _)| r).collect();
    write_jsonl(&a.out, &records)?;
    let sensitive: Vec<String> = space.sensitive().iter().map(|&i| space.names()[i].clone()).collect();
    let meta = AuditMeta {
        dataset: a.data.data.display().to_string(),
        model: a.model.display().to_string(),
        kind: saved.model.kind(),
        sensitive: sensitive.clone(),
        config: cfg.clone(),
    };
    write_json(&meta_path(&a.out), &meta)?;

    let n = records.len() as f64;
    let acc = records.iter().filter(|r| r.repr_label == r.true_label).count() as f64 / n;
    let base = records.iter().filter(|r| r.baseline_label == r.true_label).count() as f64 / n;
    let mean_leak = records.iter().map(|r| r.leakage as f64).sum::<f64>() / n;
    let hist = bench::histogram(&records, cfg.delta, sensitive.len());
    say!(out, "sensitive {}", sensitive.join(","))?;
    say!(out, "samples {}", records.len())?;
    say!(out, "accuracy {acc:.6}")?;
    say!(out, "baseline accuracy {base:.6}")?;
    say!(out, "mean leakage {mean_leak:.4} of {}", sensitive.len())?;
    let h: Vec<String> = hist.iter().enumerate().map(|(k, c)| format!("{k}:{c}")).collect();
    say!(out, "leakage histogram {}", h.join(" "))
}

fn cmd_opt(a: OptArgs, out: &mut dyn Write) -> Result<()> {
    let saved = SavedModel::load(&a.model)?;
    let ds = load_for_model(&a.data, &saved)?;
    let space = SensitiveSpec::parse_flag(&a.sensitive, a.seed).resolve(ds.space())?;
    let mut grid = GridParams::default();
    if let Some(g) = a.grid_delta {
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::Config(format!("grid delta must be in (0, 1], got {g}")));
        }
        grid.delta_robust = g;
    }
    use rayon::prelude::*;
    let results = in_pool(|| {
        ds.rows()
            .par_iter()
            .map(|x| opt_min_core(&saved.model, x, space.sensitive(), grid))
            .collect::<Result<Vec<_>>>()
    })?;
    let records: Vec<OptRecord> = results
        .iter()
        .enumerate()
        .map(|(i, r)| OptRecord {
            sample_id: i,
            revealed: r.revealed.iter().map(|&j| space.names()[j].clone()).collect(),
            size: r.revealed.len(),
            repr_label: r.repr_label.expect("opt returns core sets"),
        })
        .collect();
    if let Some(p) = &a.out {
        write_jsonl(p, &records)?;
    }
    say!(out, "# minreveal opt seed={} grid_delta={}", a.seed, grid.delta_robust)?;
    let mean = records.iter().map(|r| r.size as f64).sum::<f64>() / records.len() as f64;
    say!(out, "samples {}", records.len())?;
    say!(out, "mean minimum core set size {mean:.4} of {}", space.sensitive().len())
}

fn cmd_reveal(a: RevealArgs, stdin: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let cfg = a.engine.resolve(a.seed)?;
    let saved = SavedModel::load(&a.model)?;
    let d = saved.model.dim();
    let prior = load_prior(&a.prior, d)?;
    let names: Vec<String> = saved
        .feature_names
        .clone()
        .unwrap_or_else(|| (0..d).map(|i| format!("x{i}")).collect());
    let norm = saved.norm_params.clone();
    let space = crate::data_io::FeatureSpace::new(names.clone(), Vec::new(), norm.clone())?;

    let mut x = vec![0.0; d];
    let mut public = Vec::new();
    for item in &a.public {
        let (name, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--public expects name=value, got {item:?}")))?;
        let i = space
            .index_of(name.trim())
            .ok_or_else(|| Error::Config(format!("unknown feature `{}`", name.trim())))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse value for `{name}`: {value:?}")))?;
        x[i] = to_box(v, i, a.raw, &norm).map_err(Error::Config)?;
        public.push(i);
    }
    let sensitive: Vec<usize> = match &a.sensitive {
        Some(list) => list
            .iter()
            .map(|n| {
                space
                    .index_of(n.trim())
                    .ok_or_else(|| Error::Config(format!("unknown feature `{}`", n.trim())))
            })
            .collect::<Result<_>>()?,
        None => (0..d).filter(|i| !public.contains(i)).collect(),
    };
    if let Some(i) = (0..d).find(|i| !public.contains(i) && !sensitive.contains(i)) {
        return Err(Error::Config(format!("no value for public feature `{}`", names[i])));
    }
    if let Some(i) = sensitive.iter().find(|i| public.contains(i)) {
        return Err(Error::Config(format!("`{}` given as both public and sensitive", names[*i])));
    }
    let space = space.with_sensitive(sensitive)?;
    let engine = Engine::new(&saved.model, &prior, &space, cfg.clone())?;
    let label_name = |y: usize| -> String {
        saved
            .labels
            .as_ref()
            .and_then(|l| l.get(y).cloned())
            .unwrap_or_else(|| y.to_string())
    };

    engine_header(out, "reveal", &cfg)?;
    let mut state = engine.start(&x)?;
    loop {
        let (y, p) = engine.label_distribution(&state, 0)?.mode();
        say!(out, "step {}: most likely {} with certainty {p:.4}", state.step(), label_name(y))?;
        let step = {
            let mut oracle = |j: usize| -> Result<f64> { prompt(&names[j], j, a.raw, &norm, stdin, out) };
            engine.advance(&mut state, 0, &mut oracle)
        };
        match step {
            Ok(Some(res)) => {
                let y = res.repr_label.expect("certified result carries a label");
                say!(out, "prediction {}, {} features revealed", label_name(y), leakage(&state))?;
                let shown: Vec<&str> = state.revealed().iter().map(|&i| names[i].as_str()).collect();
                say!(out, "revealed: {}", if shown.is_empty() { "none".to_string() } else { shown.join(", ") })?;
                return say!(out, "delta {} ({})", res.delta, res.method);
            }
            Ok(None) => {
                let j = *state.revealed().last().expect("a feature was revealed");
                say!(out, "revealed {} = {}", names[j], display_value(state.values()[j], j, a.raw, &norm))?;
            }
            Err(e) => {
                let shown: Vec<&str> = state.revealed().iter().map(|&i| names[i].as_str()).collect();
                say!(out, "aborted after {} features revealed: {}", leakage(&state), shown.join(", "))?;
                return Err(e);
            }
        }
    }
}

fn to_box(v: f64, i: usize, raw: bool, norm: &[(f64, f64)]) -> std::result::Result<f64, String> {
    let (lo, hi) = if raw { norm[i] } else { (-1.0, 1.0) };
    if !v.is_finite() || v < lo || v > hi {
        return Err(format!("value {v} outside [{lo}, {hi}]"));
    }
    Ok(if raw { normalize_value(v, norm[i]) } else { v })
}

fn prompt(
    name: &str,
    i: usize,
    raw: bool,
    norm: &[(f64, f64)],
    stdin: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<f64> {
    let (lo, hi) = if raw { norm[i] } else { (-1.0, 1.0) };
    loop {
        write!(out, "{name} [{lo}, {hi}]: ")
            .and_then(|_| out.flush())
            .map_err(|e| Error::io("<stdout>", e))?;
        let mut line = String::new();
        let n = stdin.read_line(&mut line).map_err(|e| Error::io("<stdin>", e))?;
        if n == 0 {
            say!(out, "")?;
            return Err(Error::Oracle {
                feature: name.to_string(),
                message: "end of input".into(),
            });
        }
        match line.trim().parse::<f64>() {
            Ok(v) => match to_box(v, i, raw, norm) {
                Ok(b) => return Ok(b),
                Err(msg) => say!(out, "{msg}; enter a number in [{lo}, {hi}]")?,
            },
            Err(_) => say!(out, "cannot parse {:?}; enter a number in [{lo}, {hi}]", line.trim())?,
        }
    }
}

fn cmd_bench(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<SweepConfig>(p)?,
        None => SweepConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(v) = &a.sizes {
        cfg.s_sizes = v.clone();
    }
    if let Some(v) = &a.deltas {
        cfg.deltas = v.clone();
    }
    if let Some(v) = a.repetitions {
        cfg.repetitions = v;
    }
    if let Some(v) = a.kind {
        cfg.model = v;
    }
    if let Some(v) = a.samples {
        cfg.n_samples = v;
    }
    if a.max_test.is_some() {
        cfg.max_test = a.max_test;
    }
    let format = match a.format {
        Some(f) => f,
        None if a.out.extension().is_some_and(|e| e == "jsonl") => Format::Jsonl,
        None => Format::Csv,
    };
    let ds = match &a.data {
        Some(p) => load_csv(p, &a.label)?,
        None => bench::synthetic_dataset(a.seed),
    };
    cfg.validate(ds.dim())?;
    say!(out, "# minreveal bench {}", serde_json::to_string(&cfg)?)?;
    let res = in_pool(|| bench::run_sweep(&ds, &cfg))?;
    bench::emit(&res, format, &a.out)?;
    say!(out, "{:>3} {:>8} {:>8} {:>9} {:>8}", "s", "method", "delta", "accuracy", "leakage")?;
    for c in &res.cells {
        let delta = c.delta.map_or("-".to_string(), |d| d.to_string());
        say!(out, "{:>3} {:>8} {:>8} {:>9.4} {:>8.4}", c.s, c.method.to_string(), delta, c.accuracy, c.leakage)?;
    }
    Ok(())
}

/// Aggregates audit files; each input is one run, grouped by delta.
pub fn report_rows(inputs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (k, path) in inputs.iter().enumerate() {
        let records: Vec<AuditRecord> = read_jsonl(path)?;
        let meta: Option<AuditMeta> = {
            let p = meta_path(path);
            if p.exists() {
                Some(read_json(&p)?)
            } else {
                None
            }
        };
        let (dataset, model) = match &meta {
            Some(m) => (m.dataset.clone(), m.model.clone()),
            None => ("unknown".to_string(), "unknown".to_string()),
        };
        let run_id = format!("run{k}:{}", path.file_name().map(|f| f.to_string_lossy()).unwrap_or_default());
        let mut groups: BTreeMap<u64, Vec<&AuditRecord>> = BTreeMap::new();
        for r in &records {
            groups.entry(r.delta.to_bits()).or_default().push(r);
        }
        for (bits, recs) in groups {
            let n = recs.len() as f64;
            let metrics = [
                ("samples", n),
                ("accuracy", recs.iter().filter(|r| r.repr_label == r.true_label).count() as f64 / n),
                ("baseline_accuracy", recs.iter().filter(|r| r.baseline_label == r.true_label).count() as f64 / n),
                ("leakage", recs.iter().map(|r| r.leakage as f64).sum::<f64>() / n),
            ];
            for (metric, value) in metrics {
                rows.push(ReportRow {
                    run_id: run_id.clone(),
                    dataset: dataset.clone(),
                    model: model.clone(),
                    delta: f64::from_bits(bits),
                    metric: metric.to_string(),
                    value,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.dataset, &a.model)
            .cmp(&(&b.dataset, &b.model))
            .then(a.delta.total_cmp(&b.delta))
            .then(a.run_id.cmp(&b.run_id))
    });
    Ok(rows)
}

fn cmd_report(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let rows = report_rows(&a.inputs)?;
    match &a.out {
        Some(p) => {
            let mut w = csv::Writer::from_path(p)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io(p, e))?;
            say!(out, "wrote {} rows to {}", rows.len(), p.display())
        }
        None => {
            let mut w = csv::Writer::from_writer(out);
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io("<stdout>", e))
        }
    }
}

/// Raw value for display, inverse of the box mapping.
pub fn display_value(v: f64, i: usize, raw: bool, norm: &[(f64, f64)]) -> f64 {
    if raw {
        denormalize_value(v, norm[i])
    } else {
        v
    }
}
