//! Tabular ingestion, min-max normalization to the `[-1, 1]` box, the
//! public/sensitive feature partition, train/test splitting and the JSON /
//! JSONL file formats shared by the CLI.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::coreset::Method;
use crate::error::{Error, Result};
use crate::seed;

/// Maps a raw value into `[-1, 1]` using the column's `(min, max)`.
/// Values outside the range are clamped so the box domain always holds.
pub fn normalize_value(raw: f64, (min, max): (f64, f64)) -> f64 {
    let v = 2.0 * (raw - min) / (max - min) - 1.0;
    v.clamp(-1.0, 1.0)
}

/// Inverse of [`normalize_value`] for values inside the box.
pub fn denormalize_value(v: f64, (min, max): (f64, f64)) -> f64 {
    min + (v + 1.0) * 0.5 * (max - min)
}

/// Feature names, the public/sensitive partition and per-feature
/// normalization ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureSpaceRepr", into = "FeatureSpaceRepr")]
pub struct FeatureSpace {
    names: Vec<String>,
    public_idx: Vec<usize>,
    sensitive_idx: Vec<usize>,
    norm_params: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct FeatureSpaceRepr {
    names: Vec<String>,
    sensitive: Vec<usize>,
    norm_params: Vec<[f64; 2]>,
}

impl TryFrom<FeatureSpaceRepr> for FeatureSpace {
    type Error = Error;

    fn try_from(r: FeatureSpaceRepr) -> Result<Self> {
        let norm = r.norm_params.into_iter().map(|[a, b]| (a, b)).collect();
        FeatureSpace::new(r.names, r.sensitive, norm)
    }
}

impl From<FeatureSpace> for FeatureSpaceRepr {
    fn from(fs: FeatureSpace) -> Self {
        FeatureSpaceRepr {
            names: fs.names,
            sensitive: fs.sensitive_idx,
            norm_params: fs.norm_params.into_iter().map(|(a, b)| [a, b]).collect(),
        }
    }
}

impl FeatureSpace {
    /// Builds a feature space; every index not listed as sensitive is public.
    pub fn new(
        names: Vec<String>,
        sensitive_idx: Vec<usize>,
        norm_params: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let d = names.len();
        if norm_params.len() != d {
            return Err(Error::Dimension(format!(
                "{} feature names but {} normalization ranges",
                d,
                norm_params.len()
            )));
        }
        for (name, &(min, max)) in names.iter().zip(&norm_params) {
            if !(min < max) {
                return Err(Error::Normalization(format!(
                    "feature `{name}` has range [{min}, {max}]; constant features cannot be normalized"
                )));
            }
        }
        let sensitive: BTreeSet<usize> = sensitive_idx.iter().copied().collect();
        if sensitive.len() != sensitive_idx.len() {
            return Err(Error::Config("duplicate sensitive feature index".into()));
        }
        if let Some(&bad) = sensitive.iter().find(|&&i| i >= d) {
            return Err(Error::Config(format!(
                "sensitive index {bad} out of range for {d} features"
            )));
        }
        let public_idx = (0..d).filter(|i| !sensitive.contains(i)).collect();
        Ok(FeatureSpace {
            names,
            public_idx,
            sensitive_idx: sensitive.into_iter().collect(),
            norm_params,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Public feature indices, ascending.
    pub fn public(&self) -> &[usize] {
        &self.public_idx
    }

    /// Sensitive feature indices, ascending.
    pub fn sensitive(&self) -> &[usize] {
        &self.sensitive_idx
    }

    pub fn norm_params(&self) -> &[(f64, f64)] {
        &self.norm_params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Same features and ranges with a different sensitive set.
    pub fn with_sensitive(&self, sensitive_idx: Vec<usize>) -> Result<Self> {
        FeatureSpace::new(self.names.clone(), sensitive_idx, self.norm_params.clone())
    }

    pub fn with_sensitive_names(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.index_of(n)
                    .ok_or_else(|| Error::Schema(format!("unknown sensitive feature `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_sensitive(idx)
    }
}

/// Normalized rows with integer labels. Raw values are kept so that a split
/// can re-normalize with training-only ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    rows: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
    labels: Vec<usize>,
    label_names: Vec<String>,
    space: FeatureSpace,
}

/// Options for [`load_csv_with`].
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Normalize with these ranges (e.g. a model's training ranges) instead
    /// of the ranges of the rows being loaded.
    pub norm_params: Option<Vec<(f64, f64)>>,
    /// Use this label vocabulary (index = class) instead of the sorted
    /// distinct labels found in the file.
    pub label_names: Option<Vec<String>>,
}

impl Dataset {
    /// Builds a dataset from raw values, normalizing with the given ranges or
    /// with the per-column range of `raw`.
    pub fn from_raw(
        names: Vec<String>,
        raw: Vec<Vec<f64>>,
        labels: Vec<usize>,
        label_names: Vec<String>,
        norm_params: Option<Vec<(f64, f64)>>,
    ) -> Result<Self> {
        let d = names.len();
        if raw.len() < 2 {
            return Err(Error::Schema(format!(
                "dataset needs at least 2 rows, got {}",
                raw.len()
            )));
        }
        if label_names.len() < 2 {
            return Err(Error::Schema(format!(
                "dataset needs at least 2 classes, got {}",
                label_names.len()
            )));
        }
        if labels.len() != raw.len() {
            return Err(Error::Dimension(format!(
                "{} rows but {} labels",
                raw.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= label_names.len()) {
            return Err(Error::Schema(format!("label index {y} out of range")));
        }
        if let Some(r) = raw.iter().position(|r| r.len() != d) {
            return Err(Error::Dimension(format!(
                "row {r} has {} values, expected {d}",
                raw[r].len()
            )));
        }
        let norm = match norm_params {
            Some(n) => n,
            None => column_ranges(&raw, d),
        };
        let space = FeatureSpace::new(names, Vec::new(), norm)?;
        let rows = raw
            .iter()
            .map(|r| {
                r.iter()
                    .zip(space.norm_params())
                    .map(|(&v, &mm)| normalize_value(v, mm))
                    .collect()
            })
            .collect();
        Ok(Dataset {
            rows,
            raw,
            labels,
            label_names,
            space,
        })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn raw_rows(&self) -> &[Vec<f64>] {
        &self.raw
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn space(&self) -> &FeatureSpace {
        &self.space
    }

    /// Replaces the feature partition; ranges and names must be unchanged.
    pub fn with_space(mut self, space: FeatureSpace) -> Result<Self> {
        if space.names() != self.space.names() || space.norm_params() != self.space.norm_params()
        {
            return Err(Error::Schema(
                "feature space does not match dataset columns".into(),
            ));
        }
        self.space = space;
        Ok(self)
    }

    /// Rows `idx`, keeping this dataset's ranges and partition.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        self.subset(idx, Some(self.space.norm_params.clone()))
    }

    fn subset(&self, idx: &[usize], norm: Option<Vec<(f64, f64)>>) -> Result<Dataset> {
        let raw = idx.iter().map(|&i| self.raw[i].clone()).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        let ds = Dataset::from_raw(
            self.space.names.clone(),
            raw,
            labels,
            self.label_names.clone(),
            norm,
        )?;
        let space = ds.space.with_sensitive(self.space.sensitive_idx.clone())?;
        ds.with_space(space)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Dataset> {
        read_json(path)
    }
}

fn column_ranges(raw: &[Vec<f64>], d: usize) -> Vec<(f64, f64)> {
    (0..d)
        .map(|c| {
            raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r[c]), hi.max(r[c]))
            })
        })
        .collect()
}

/// Sorted distinct labels: numerically when every label parses as a number,
/// lexicographically otherwise.
fn label_vocabulary(raw: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&String> = raw.iter().collect();
    let mut labels: Vec<String> = distinct.into_iter().cloned().collect();
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.trim().parse().ok()).collect();
    if let Some(values) = numeric {
        let mut paired: Vec<(f64, String)> = values.into_iter().zip(labels).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0));
        labels = paired.into_iter().map(|(_, l)| l).collect();
    }
    labels
}

/// Loads a CSV with a header row, normalizing every feature column with its
/// own range. All features start public.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    load_csv_with(path, label_column, &LoadOptions::default())
}

pub fn load_csv_with(path: &Path, label_column: &str, opts: &LoadOptions) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, label_column, opts)
}

pub fn read_csv<R: Read>(reader: R, label_column: &str, opts: &LoadOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let label_pos = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Schema(format!("label column `{label_column}` not found")))?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_pos)
        .map(|(_, h)| h.clone())
        .collect();

    let mut raw = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        // header is line 1
        let line = r + 2;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: line,
                column: String::new(),
                message: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        let mut values = Vec::with_capacity(names.len());
        for (c, cell) in record.iter().enumerate() {
            if c == label_pos {
                raw_labels.push(cell.to_owned());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                column: headers[c].clone(),
                message: format!("`{cell}` is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: headers[c].clone(),
                    message: format!("`{cell}` is not finite"),
                });
            }
            values.push(v);
        }
        raw.push(values);
    }

    let vocab = match &opts.label_names {
        Some(v) => v.clone(),
        None => label_vocabulary(&raw_labels),
    };
    let labels = raw_labels
        .iter()
        .map(|l| {
            vocab
                .iter()
                .position(|v| v == l)
                .ok_or_else(|| Error::Schema(format!("label `{l}` not in model vocabulary")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(norm) = &opts.norm_params {
        if norm.len() != names.len() {
            return Err(Error::Schema(format!(
                "{} feature columns but {} normalization ranges",
                names.len(),
                norm.len()
            )));
        }
    }
    Dataset::from_raw(names, raw, labels, vocab, opts.norm_params.clone())
}

/// Writes raw (unnormalized) values with a trailing label column.
pub fn write_csv(dataset: &Dataset, path: &Path, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = dataset.space.names.iter().map(String::as_str).collect();
    header.push(label_column);
    w.write_record(&header)?;
    for (row, &y) in dataset.raw.iter().zip(&dataset.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(dataset.label_names[y].clone());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Deterministic shuffled split. The training part is normalized with its
/// own ranges; the test part with the training ranges (clamped to the box).
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "split of {n} rows at fraction {train_fraction} leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let train = dataset.subset(&order[..n_train], None)?;
    let test = dataset.subset(&order[n_train..], Some(train.space.norm_params.clone()))?;
    Ok((train, test))
}

/// Uniformly picks `k` sensitive features without replacement.
pub fn pick_sensitive(space: &FeatureSpace, k: usize, seed: u64) -> Result<FeatureSpace> {
    let d = space.dim();
    if k == 0 || k > d {
        return Err(Error::Config(format!(
            "sensitive count {k} outside [1, {d}]"
        )));
    }
    let mut idx = index::sample(&mut seed::rng(seed), d, k).into_vec();
    idx.sort_unstable();
    space.with_sensitive(idx)
}

/// Either an explicit list of sensitive feature names or a random draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SensitiveSpec {
    Names(Vec<String>),
    Random { k: usize, seed: u64 },
}

impl SensitiveSpec {
    pub fn resolve(&self, space: &FeatureSpace) -> Result<FeatureSpace> {
        match self {
            SensitiveSpec::Names(names) => space.with_sensitive_names(names),
            SensitiveSpec::Random { k, seed } => pick_sensitive(space, *k, *seed),
        }
    }

    /// Parses the `--sensitive` flag: an integer count or comma-separated names.
    pub fn parse_flag(flag: &str, seed: u64) -> SensitiveSpec {
        match flag.trim().parse::<usize>() {
            Ok(k) => SensitiveSpec::Random { k, seed },
            Err(_) => SensitiveSpec::Names(
                flag.split(',')
                    .map(|s| s.trim().to_owned())
                    .filter(|s| !s.is_empty())
                    .collect(),
            ),
        }
    }
}

/// Dataset configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub label: String,
    pub sensitive: SensitiveSpec,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub seed: u64,
}

fn default_train_fraction() -> f64 {
    0.7
}

impl DatasetConfig {
    pub fn load(path: &Path) -> Result<DatasetConfig> {
        let cfg: DatasetConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// One line of the per-sample audit output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub sample_id: usize,
    pub delta: f64,
    /// Feature names in reveal order.
    pub revealed: Vec<String>,
    pub leakage: usize,
    pub repr_label: usize,
    pub true_label: usize,
    pub baseline_label: usize,
    pub method: Method,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl_to(&mut w, items)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl_to<T: Serialize, W: Write>(w: &mut W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
