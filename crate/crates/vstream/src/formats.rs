//! JSON, JSON-lines and CSV artifacts exchanged between subcommands.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use vstream_core::estimator::{EstimatorWeights, TrainingSample, TrainingSet};
use vstream_core::features::{MaskSample, SpanFeatureMatrix};
use vstream_core::metrics::EvalReport;
use vstream_core::oracle::DatasetSpec;
use vstream_core::unitization::{PartitionMethod, RegionPartition};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {source}")]
    JsonLine { line: usize, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] vstream_core::Error),
}

fn invalid(msg: impl Into<String>) -> FormatError {
    FormatError::Invalid(msg.into())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, FormatError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `{method, K, grid_dims, membership}` with membership as a row-major
/// `K x M` string of `0`/`1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub grid_dims: [usize; 2],
    pub membership: String,
}

impl PartitionFile {
    pub fn from_partition(p: &RegionPartition) -> Self {
        let membership = p
            .membership()
            .iter()
            .flatten()
            .map(|&b| if b { '1' } else { '0' })
            .collect();
        PartitionFile {
            method: p.method().as_str().to_string(),
            k: p.num_regions(),
            grid_dims: [p.grid_dims().0, p.grid_dims().1],
            membership,
        }
    }

    pub fn to_partition(&self) -> Result<RegionPartition, FormatError> {
        let method: PartitionMethod = self.method.parse()?;
        let m = self.grid_dims[0] * self.grid_dims[1];
        if self.membership.len() != self.k * m {
            return Err(invalid(format!(
                "membership has {} bits, expected K*M = {}",
                self.membership.len(),
                self.k * m
            )));
        }
        let bits: Vec<bool> = self
            .membership
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(invalid(format!("membership contains {other:?}"))),
            })
            .collect::<Result<_, _>>()?;
        let rows: Vec<Vec<bool>> = bits.chunks(m.max(1)).map(<[bool]>::to_vec).collect();
        Ok(RegionPartition::from_membership(method, (self.grid_dims[0], self.grid_dims[1]), &rows)?)
    }
}

pub fn read_partition(path: impl AsRef<Path>) -> Result<RegionPartition, FormatError> {
    read_json::<PartitionFile>(path)?.to_partition()
}

pub fn write_partition(p: &RegionPartition, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_json(&PartitionFile::from_partition(p), path)
}

/// `{L, H, w, config_hash, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    #[serde(rename = "L")]
    pub num_layers: usize,
    #[serde(rename = "H")]
    pub num_heads: usize,
    pub w: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl From<&EstimatorWeights> for WeightsFile {
    fn from(w: &EstimatorWeights) -> Self {
        WeightsFile {
            num_layers: w.num_layers,
            num_heads: w.num_heads,
            w: w.w.clone(),
            config_hash: format!("{:016x}", w.config_hash),
            seed: w.seed,
        }
    }
}

impl WeightsFile {
    pub fn to_weights(&self) -> Result<EstimatorWeights, FormatError> {
        let mut w = EstimatorWeights::new(self.num_layers, self.num_heads, self.w.clone())?;
        w.config_hash = u64::from_str_radix(&self.config_hash, 16)
            .map_err(|e| invalid(format!("config_hash {:?}: {e}", self.config_hash)))?;
        w.seed = self.seed;
        Ok(w)
    }
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<EstimatorWeights, FormatError> {
    read_json::<WeightsFile>(path)?.to_weights()
}

pub fn write_weights(w: &EstimatorWeights, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_json(&WeightsFile::from(w), path)
}

/// One training sample per line. `masks` hold 1 for retained regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLine {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub num_layers: usize,
    #[serde(rename = "H")]
    pub num_heads: usize,
    #[serde(rename = "F")]
    pub features: Vec<f64>,
    pub masks: Vec<Vec<u8>>,
    pub targets: Vec<f64>,
    #[serde(default = "yes")]
    pub correct: bool,
}

fn yes() -> bool {
    true
}

impl From<&TrainingSample> for SampleLine {
    fn from(s: &TrainingSample) -> Self {
        SampleLine {
            k: s.features.num_regions,
            num_layers: s.features.num_layers,
            num_heads: s.features.num_heads,
            features: s.features.data.clone(),
            masks: s
                .masks
                .iter()
                .map(|m| m.retained().iter().map(|&b| u8::from(b)).collect())
                .collect(),
            targets: s.targets.clone(),
            correct: s.correct,
        }
    }
}

impl SampleLine {
    pub fn to_sample(&self) -> Result<TrainingSample, FormatError> {
        let d = self.num_layers * self.num_heads;
        if self.features.len() != self.k * d {
            return Err(invalid(format!(
                "F has {} entries, expected K*L*H = {}",
                self.features.len(),
                self.k * d
            )));
        }
        let rows: Vec<Vec<f64>> = self.features.chunks(d.max(1)).map(<[f64]>::to_vec).collect();
        let features = SpanFeatureMatrix::from_rows(self.num_layers, self.num_heads, &rows)?;
        let masks = self
            .masks
            .iter()
            .map(|m| {
                m.iter()
                    .map(|&b| match b {
                        0 => Ok(false),
                        1 => Ok(true),
                        other => Err(invalid(format!("mask entry {other} is not 0 or 1"))),
                    })
                    .collect::<Result<Vec<bool>, _>>()
                    .map(MaskSample::from_retained)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let sample = TrainingSample {
            features,
            masks,
            targets: self.targets.clone(),
            correct: self.correct,
        };
        sample.check()?;
        Ok(sample)
    }
}

pub fn write_training_set(set: &TrainingSet, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in &set.samples {
        serde_json::to_writer(&mut w, &SampleLine::from(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_set(path: impl AsRef<Path>) -> Result<TrainingSet, FormatError> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine =
            serde_json::from_str(&line).map_err(|source| FormatError::JsonLine { line: n + 1, source })?;
        samples.push(parsed.to_sample().map_err(|e| invalid(format!("line {}: {e}", n + 1)))?);
    }
    Ok(TrainingSet { samples })
}

/// Written next to a collected training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub examples: usize,
    pub spans: usize,
    pub passes: u64,
    pub seed: u64,
    pub mode: String,
    pub spec: DatasetSpec,
}

pub fn write_loss_csv(history: &[f64], learning_rates: &[f64], path: impl AsRef<Path>) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss", "learning_rate"])?;
    for (i, (loss, lr)) in history.iter().zip(learning_rates).enumerate() {
        w.write_record([i.to_string(), loss.to_string(), lr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the evaluation summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub method: String,
    pub spans: usize,
    pub lds_mean: Option<f64>,
    pub lds_std: Option<f64>,
    pub lds_by_example_mean: Option<f64>,
    pub top_k: usize,
    pub top_k_drop_mean: Option<f64>,
    pub r_squared_mean: Option<f64>,
    pub lds_undefined: usize,
}

impl EvalRow {
    pub fn new(dataset: &str, report: &EvalReport) -> Self {
        EvalRow {
            dataset: dataset.into(),
            method: report.method.clone(),
            spans: report.spans.len(),
            lds_mean: report.lds_pooled.map(|s| s.mean),
            lds_std: report.lds_pooled.map(|s| s.std),
            lds_by_example_mean: report.lds_by_example.map(|s| s.mean),
            top_k: report.top_k,
            top_k_drop_mean: report.top_k_drop.map(|s| s.mean),
            r_squared_mean: report.r_squared.map(|s| s.mean),
            lds_undefined: report.lds_undefined,
        }
    }
}

pub fn write_eval_csv(rows: &[EvalRow], path: impl AsRef<Path>) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
