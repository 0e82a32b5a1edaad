//! Multi-source pools: Gaussian-mixture synthesis with controlled
//! corruption, and CSV/JSONL ingestion with train-statistics
//! standardization.
//!
//! A pool is K training sources plus clean validation and test splits that
//! are disjoint by sample id and never corrupted. Synthetic sources carry
//! their ground-truth labels alongside the (possibly flipped) observed
//! labels so experiments can measure corruption effects; tabular sources
//! treat the file's labels as ground truth.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache::sample_digest;
use crate::error::{Error, Result};
use crate::mlp::Target;

/// Source index carried by validation/test samples, which belong to no
/// training source.
pub const NO_SOURCE: usize = usize::MAX;

/// One labeled sample. `label` is what training sees; `clean_label` is the
/// pre-corruption ground truth (equal to `label` for tabular data). The
/// digest covers features plus observed label, so byte-identical duplicates
/// share a digest while corrupted copies do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub digest: u64,
    pub features: Vec<f64>,
    pub label: usize,
    pub clean_label: usize,
    pub source: usize,
}

impl Sample {
    pub fn new(
        id: u64,
        features: Vec<f64>,
        label: usize,
        clean_label: usize,
        source: usize,
    ) -> Self {
        let digest = sample_digest(&features, &Target::Class(label));
        Sample {
            id,
            digest,
            features,
            label,
            clean_label,
            source,
        }
    }

    pub fn target(&self) -> Target {
        Target::Class(self.label)
    }

    pub fn is_corrupted(&self) -> bool {
        self.label != self.clean_label
    }
}

/// Per-source corruption recipe: labels flipped uniformly to *other*
/// classes at `label_flip`, isotropic feature noise with `feature_noise`
/// standard deviation, and a size multiplier `duplication` (2.0 doubles the
/// source with byte-identical copies).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    pub label_flip: f64,
    pub feature_noise: f64,
    pub duplication: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            label_flip: 0.0,
            feature_noise: 0.0,
            duplication: 1.0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.label_flip.is_finite() || !(0.0..=1.0).contains(&self.label_flip) {
            return Err(Error::Config(format!(
                "label_flip must lie in [0, 1], got {}",
                self.label_flip
            )));
        }
        if !self.feature_noise.is_finite() || self.feature_noise < 0.0 {
            return Err(Error::Config(format!(
                "feature_noise must be non-negative, got {}",
                self.feature_noise
            )));
        }
        if !self.duplication.is_finite() || self.duplication < 1.0 {
            return Err(Error::Config(format!(
                "duplication must be >= 1, got {}",
                self.duplication
            )));
        }
        Ok(())
    }
}

/// Default corruption ladder: six sources of increasing label noise.
pub fn default_flip_ladder() -> Vec<CorruptionSpec> {
    [0.0, 0.05, 0.1, 0.2, 0.3, 0.4]
        .iter()
        .map(|&rate| CorruptionSpec {
            label_flip: rate,
            ..Default::default()
        })
        .collect()
}

/// Parameters of the synthetic generator. Class means sit at
/// `separation` times random unit directions; within-class features are
/// isotropic unit-variance Gaussians. One source per entry of
/// `corruption`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples_per_source: usize,
    pub separation: f64,
    pub corruption: Vec<CorruptionSpec>,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            feature_dim: 32,
            samples_per_source: 2000,
            separation: 3.0,
            corruption: default_flip_ladder(),
            validation_samples: 1000,
            test_samples: 2000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.samples_per_source == 0 {
            return Err(Error::Config("samples_per_source must be positive".into()));
        }
        if self.corruption.is_empty() {
            return Err(Error::Config("need at least one source".into()));
        }
        if !self.separation.is_finite() || self.separation <= 0.0 {
            return Err(Error::Config(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        for spec in &self.corruption {
            spec.validate()?;
        }
        Ok(())
    }
}

/// K training sources plus clean validation/test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePool {
    pub sources: Vec<Vec<Sample>>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl SourcePool {
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn train_len(&self) -> usize {
        self.sources.iter().map(Vec::len).sum()
    }

    pub fn iter_train(&self) -> impl Iterator<Item = &Sample> {
        self.sources.iter().flatten()
    }

    /// Structural checks: consistent feature width, labels in range, ids
    /// unique across every split, source indices coherent.
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("pool has no sources".into()));
        }
        let mut ids = BTreeSet::new();
        let splits = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s))
            .chain([(NO_SOURCE, &self.validation), (NO_SOURCE, &self.test)]);
        for (source, split) in splits {
            for s in split {
                if s.features.len() != self.feature_dim {
                    return Err(Error::Shape(format!(
                        "sample {} has {} features, pool width is {}",
                        s.id,
                        s.features.len(),
                        self.feature_dim
                    )));
                }
                if s.label >= self.num_classes || s.clean_label >= self.num_classes {
                    return Err(Error::Data(format!(
                        "sample {} label out of range for {} classes",
                        s.id, self.num_classes
                    )));
                }
                if s.source != source {
                    return Err(Error::Data(format!(
                        "sample {} carries source {} but lives in source {}",
                        s.id, s.source, source
                    )));
                }
                if !ids.insert(s.id) {
                    return Err(Error::Duplicate(format!("sample id {} repeats", s.id)));
                }
            }
        }
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Flips a label uniformly at random to one of the other classes.
fn flip_label(rng: &mut ChaCha8Rng, label: usize, num_classes: usize) -> usize {
    let mut other = rng.random_range(0..num_classes - 1);
    if other >= label {
        other += 1;
    }
    other
}

/// Draws `count` clean samples with round-robin balanced classes, shuffled.
fn draw_clean(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    count: usize,
) -> Vec<(Vec<f64>, usize)> {
    let num_classes = means.len();
    let dim = means[0].len();
    let mut out: Vec<(Vec<f64>, usize)> = (0..count)
        .map(|i| {
            let class = i % num_classes;
            let x: Vec<f64> = (0..dim)
                .map(|j| means[class][j] + standard_normal(rng))
                .collect();
            (x, class)
        })
        .collect();
    out.shuffle(rng);
    out
}

/// Builds a multi-source Gaussian-mixture pool: per-source corruption
/// (feature noise, then label flips, then duplication), clean validation
/// and test splits, sequential ids, digests computed post-corruption.
pub fn synthesize_pool(spec: &SynthSpec) -> Result<SourcePool> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            unit_direction(&mut rng, spec.feature_dim)
                .into_iter()
                .map(|x| x * spec.separation)
                .collect()
        })
        .collect();

    let mut next_id: u64 = 0;
    let mut sources = Vec::with_capacity(spec.corruption.len());
    for (source_idx, corruption) in spec.corruption.iter().enumerate() {
        let mut raw = draw_clean(&mut rng, &means, spec.samples_per_source);
        let mut labels: Vec<(usize, usize)> = Vec::with_capacity(raw.len());
        for (x, clean) in raw.iter_mut() {
            if corruption.feature_noise > 0.0 {
                for v in x.iter_mut() {
                    *v += corruption.feature_noise * standard_normal(&mut rng);
                }
            }
            let observed = if corruption.label_flip > 0.0
                && rng.random::<f64>() < corruption.label_flip
            {
                flip_label(&mut rng, *clean, spec.num_classes)
            } else {
                *clean
            };
            labels.push((observed, *clean));
        }
        let mut rows: Vec<(Vec<f64>, usize, usize)> = raw
            .into_iter()
            .zip(labels)
            .map(|((x, _), (observed, clean))| (x, observed, clean))
            .collect();
        let extra = ((corruption.duplication - 1.0) * rows.len() as f64).round() as usize;
        for _ in 0..extra {
            let pick = rng.random_range(0..rows.len());
            rows.push(rows[pick].clone());
        }
        rows.shuffle(&mut rng);
        let samples = rows
            .into_iter()
            .map(|(x, observed, clean)| {
                let s = Sample::new(next_id, x, observed, clean, source_idx);
                next_id += 1;
                s
            })
            .collect();
        sources.push(samples);
    }

    let eval_split = |rng: &mut ChaCha8Rng, count: usize, next_id: &mut u64| -> Vec<Sample> {
        draw_clean(rng, &means, count)
            .into_iter()
            .map(|(x, class)| {
                let s = Sample::new(*next_id, x, class, class, NO_SOURCE);
                *next_id += 1;
                s
            })
            .collect()
    };
    let validation = eval_split(&mut rng, spec.validation_samples, &mut next_id);
    let test = eval_split(&mut rng, spec.test_samples, &mut next_id);

    let pool = SourcePool {
        sources,
        validation,
        test,
        num_classes: spec.num_classes,
        feature_dim: spec.feature_dim,
    };
    pool.validate()?;
    Ok(pool)
}

/// How to read a tabular file. `label_column` names the CSV column / JSONL
/// field with the class index; `source_column`, when set, assigns training
/// samples to sources (otherwise a seeded uniform K-way split over
/// `num_sources`). `clean_label_column` optionally restores ground truth
/// written by the synthesizer. Validation/test fractions are carved from
/// the whole file before source assignment; features are standardized with
/// train-split statistics when `standardize` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularSchema {
    pub label_column: String,
    pub source_column: Option<String>,
    pub clean_label_column: Option<String>,
    pub num_sources: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TabularSchema {
    fn default() -> Self {
        TabularSchema {
            label_column: "label".to_string(),
            source_column: Some("source".to_string()),
            clean_label_column: None,
            num_sources: 1,
            validation_fraction: 0.1,
            test_fraction: 0.2,
            standardize: true,
            seed: 0,
        }
    }
}

impl TabularSchema {
    pub fn validate(&self) -> Result<()> {
        if self.label_column.is_empty() {
            return Err(Error::Config("label_column must be named".into()));
        }
        if self.source_column.is_none() && self.num_sources == 0 {
            return Err(Error::Config("num_sources must be positive".into()));
        }
        for (name, f) in [
            ("validation_fraction", self.validation_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !f.is_finite() || !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {f}")));
            }
        }
        if self.validation_fraction + self.test_fraction >= 1.0 {
            return Err(Error::Config(
                "validation and test fractions leave no training data".into(),
            ));
        }
        Ok(())
    }
}

/// One parsed row before splitting/standardization.
struct RawRow {
    line: usize,
    features: Vec<f64>,
    label: usize,
    clean_label: Option<usize>,
    source: Option<usize>,
}

fn parse_class(value: &str, column: &str, line: usize) -> Result<usize> {
    let trimmed = value.trim();
    if let Ok(v) = trimmed.parse::<usize>() {
        return Ok(v);
    }
    match trimmed.parse::<f64>() {
        Ok(f) if f >= 0.0 && f.fract() == 0.0 && f <= usize::MAX as f64 => Ok(f as usize),
        _ => Err(Error::Schema(format!(
            "line {line}: column \"{column}\" holds \"{value}\", not a class index"
        ))),
    }
}

fn parse_csv(path: &Path, schema: &TabularSchema) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let label_idx = find(&schema.label_column).ok_or_else(|| {
        Error::Schema(format!(
            "missing label column \"{}\"",
            schema.label_column
        ))
    })?;
    let source_idx = match &schema.source_column {
        // A named source column is used when present but not required.
        Some(name) => find(name),
        None => None,
    };
    let clean_idx = match &schema.clean_label_column {
        Some(name) => Some(find(name).ok_or_else(|| {
            Error::Schema(format!("missing clean-label column \"{name}\""))
        })?),
        None => None,
    };
    let reserved: BTreeSet<usize> = [Some(label_idx), source_idx, clean_idx]
        .into_iter()
        .flatten()
        .collect();

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        let mut features = Vec::with_capacity(headers.len() - reserved.len());
        for (col, value) in record.iter().enumerate() {
            if reserved.contains(&col) {
                continue;
            }
            let parsed: f64 = value.trim().parse().map_err(|_| {
                Error::Schema(format!(
                    "line {line}: non-numeric value \"{value}\" in column \"{}\"",
                    &headers[col]
                ))
            })?;
            features.push(parsed);
        }
        let label = parse_class(&record[label_idx], &schema.label_column, line)?;
        let source = source_idx
            .map(|idx| parse_class(&record[idx], "source", line))
            .transpose()?;
        let clean_label = clean_idx
            .map(|idx| parse_class(&record[idx], "clean_label", line))
            .transpose()?;
        rows.push(RawRow {
            line,
            features,
            label,
            clean_label,
            source,
        });
    }
    Ok(rows)
}

fn parse_jsonl(path: &Path, schema: &TabularSchema) -> Result<Vec<RawRow>> {
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut rows = Vec::new();
    for (i, line_result) in BufReader::new(file).lines().enumerate() {
        let line = i + 1;
        let text = line_result?;
        if text.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("line {line}: invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Data(format!("line {line}: row is not a JSON object")))?;
        let features = obj
            .get("features")
            .and_then(|f| f.as_array())
            .ok_or_else(|| {
                Error::Schema(format!("line {line}: missing \"features\" array"))
            })?
            .iter()
            .map(|v| {
                v.as_f64().ok_or_else(|| {
                    Error::Schema(format!("line {line}: non-numeric feature {v}"))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let get_class = |field: &str, required: bool| -> Result<Option<usize>> {
            match obj.get(field) {
                Some(v) => v
                    .as_u64()
                    .map(|u| Some(u as usize))
                    .ok_or_else(|| {
                        Error::Schema(format!(
                            "line {line}: field \"{field}\" holds {v}, not a class index"
                        ))
                    }),
                None if required => Err(Error::Schema(format!(
                    "line {line}: missing \"{field}\" field"
                ))),
                None => Ok(None),
            }
        };
        let label = get_class(&schema.label_column, true)?.expect("required field");
        let source = match &schema.source_column {
            Some(name) => get_class(name, false)?,
            None => None,
        };
        let clean_label = match &schema.clean_label_column {
            Some(name) => get_class(name, false)?,
            None => None,
        };
        rows.push(RawRow {
            line,
            features,
            label,
            clean_label,
            source,
        });
    }
    Ok(rows)
}

/// Loads a CSV (`.csv`) or JSONL (`.jsonl`/`.json`) dataset into a pool:
/// seeded validation/test carve-out, source grouping, optional
/// standardization with train-split statistics. Sample ids are file row
/// indices, so different encodings of the same data produce digest-equal
/// pools.
pub fn load_tabular(path: &Path, schema: &TabularSchema) -> Result<SourcePool> {
    schema.validate()?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let rows = match ext.as_str() {
        "csv" => parse_csv(path, schema)?,
        "jsonl" | "json" => parse_jsonl(path, schema)?,
        other => {
            return Err(Error::Config(format!(
                "unsupported dataset extension \"{other}\" (expected csv or jsonl)"
            )))
        }
    };
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", path.display())));
    }
    let dim = rows[0].features.len();
    if dim == 0 {
        return Err(Error::Schema(format!(
            "line {}: row has no feature columns",
            rows[0].line
        )));
    }
    for row in &rows {
        if row.features.len() != dim {
            return Err(Error::Data(format!(
                "line {}: {} features where previous rows had {dim}",
                row.line,
                row.features.len()
            )));
        }
    }
    let num_classes = rows
        .iter()
        .map(|r| r.label.max(r.clean_label.unwrap_or(0)))
        .max()
        .unwrap()
        + 1;

    // Carve validation/test over shuffled row order, deterministically.
    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(schema.seed);
    order.shuffle(&mut rng);
    let test_n = (schema.test_fraction * n as f64).round() as usize;
    let val_n = (schema.validation_fraction * n as f64).round() as usize;
    if test_n + val_n >= n {
        return Err(Error::Config(
            "validation and test fractions leave no training data".into(),
        ));
    }
    let (test_rows, rest) = order.split_at(test_n);
    let (val_rows, train_rows) = rest.split_at(val_n);

    // Standardize with train-split statistics.
    let mut shift = vec![0.0; dim];
    let mut scale = vec![1.0; dim];
    if schema.standardize {
        let m = train_rows.len() as f64;
        for &r in train_rows {
            for (j, v) in rows[r].features.iter().enumerate() {
                shift[j] += v / m;
            }
        }
        let mut var = vec![0.0; dim];
        for &r in train_rows {
            for (j, v) in rows[r].features.iter().enumerate() {
                var[j] += (v - shift[j]) * (v - shift[j]) / m;
            }
        }
        for j in 0..dim {
            let sd = var[j].sqrt();
            scale[j] = if sd > 1e-12 { sd } else { 1.0 };
        }
    }
    let standardized = |row: &RawRow| -> Vec<f64> {
        row.features
            .iter()
            .enumerate()
            .map(|(j, v)| (v - shift[j]) / scale[j])
            .collect()
    };

    // Source assignment for training rows: the file's column when
    // available, otherwise a seeded round-robin over the shuffled order.
    let num_sources = match &schema.source_column {
        Some(_) if rows.iter().any(|r| r.source.is_some()) => {
            for row in &rows {
                if row.source.is_none() {
                    return Err(Error::Data(format!(
                        "line {}: missing source value while other rows have one",
                        row.line
                    )));
                }
            }
            rows.iter().map(|r| r.source.unwrap()).max().unwrap() + 1
        }
        _ => schema.num_sources.max(1),
    };
    let from_column = rows[0].source.is_some() && schema.source_column.is_some();

    let mut sources: Vec<Vec<Sample>> = vec![Vec::new(); num_sources];
    for (slot, &r) in train_rows.iter().enumerate() {
        let row = &rows[r];
        let source = if from_column {
            row.source.unwrap()
        } else {
            slot % num_sources
        };
        let label = row.label;
        let clean = row.clean_label.unwrap_or(label);
        sources[source].push(Sample::new(r as u64, standardized(row), label, clean, source));
    }
    let eval_samples = |idxs: &[usize]| -> Vec<Sample> {
        idxs.iter()
            .map(|&r| {
                let row = &rows[r];
                let clean = row.clean_label.unwrap_or(row.label);
                Sample::new(r as u64, standardized(row), row.label, clean, NO_SOURCE)
            })
            .collect()
    };

    let pool = SourcePool {
        sources,
        validation: eval_samples(val_rows),
        test: eval_samples(test_rows),
        num_classes,
        feature_dim: dim,
    };
    pool.validate()?;
    Ok(pool)
}

/// Writes the training pool as JSONL rows `{"features", "label", "source",
/// "clean_label"}`, one per training sample.
pub fn write_pool_jsonl(pool: &SourcePool, out: &mut dyn std::io::Write) -> Result<()> {
    for s in pool.iter_train() {
        let row = serde_json::json!({
            "features": s.features,
            "label": s.label,
            "source": s.source,
            "clean_label": s.clean_label,
        });
        writeln!(out, "{row}")?;
    }
    Ok(())
}
