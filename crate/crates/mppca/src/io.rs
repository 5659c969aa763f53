//! Dataset ingestion, per-column standardization, and model persistence.
//!
//! CSV convention: comma-separated numeric fields, optional header row, an
//! empty field marks a missing value, and an optional trailing column named
//! `fault` carries 0/1 labels. Models persist as a versioned, self-describing
//! JSON document with explicit shape fields.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missing::MaskedSample;
use crate::mixture::{MixtureParams, TrainingConfig};
use crate::monitoring::{DetectionMode, StatisticMode, ThresholdSet};
use crate::ppca::PpcaParams;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// An ingested table of (possibly masked) samples plus optional fault labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<MaskedSample>,
    pub column_names: Vec<String>,
    pub fault_labels: Option<Vec<bool>>,
    /// Whether the source file carried a header row; echoed on write.
    pub has_header: bool,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.rows.first().map_or(0, |r| r.d())
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.is_complete())
    }

    /// Dense N x d matrix; errors if any value is missing.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if !self.is_complete() {
            return Err(Error::InvalidParameter(
                "dataset contains missing values; use the masked path".into(),
            ));
        }
        Ok(DMatrix::from_fn(self.n(), self.d(), |r, c| {
            self.rows[r].values()[c]
        }))
    }

    pub fn from_matrix(data: &DMatrix<f64>) -> Self {
        let rows = (0..data.nrows())
            .map(|r| MaskedSample::complete(data.row(r).transpose()).expect("d >= 1"))
            .collect();
        Dataset {
            rows,
            column_names: (1..=data.ncols()).map(|j| format!("x{j}")).collect(),
            fault_labels: None,
            has_header: false,
        }
    }
}

/// Read a CSV file. With `has_header`, a final column named `fault` is
/// parsed as 0/1 labels instead of data.
pub fn read_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;

    let mut column_names: Vec<String> = Vec::new();
    let mut fault_column = false;
    if has_header {
        column_names = reader.headers()?.iter().map(str::to_owned).collect();
        if column_names.last().map(String::as_str) == Some("fault") {
            fault_column = true;
            column_names.pop();
        }
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row_number = idx + 1 + usize::from(has_header);
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Parse {
                row: row_number,
                col: record.len(),
                message: format!("ragged row: expected {expected} fields, got {}", record.len()),
            });
        }
        let d = expected - usize::from(fault_column);
        let mut values = DVector::zeros(d);
        let mut observed = vec![true; d];
        for (col, field) in record.iter().enumerate() {
            if fault_column && col == d {
                let label = field.parse::<f64>().map_err(|e| Error::Parse {
                    row: row_number,
                    col: col + 1,
                    message: format!("bad fault label '{field}': {e}"),
                })?;
                labels.push(label != 0.0);
                continue;
            }
            if field.is_empty() {
                observed[col] = false;
                continue;
            }
            values[col] = field.parse::<f64>().map_err(|e| Error::Parse {
                row: row_number,
                col: col + 1,
                message: format!("non-numeric field '{field}': {e}"),
            })?;
        }
        rows.push(MaskedSample::new(values, observed)?);
    }
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    if column_names.is_empty() {
        column_names = (1..=rows[0].d()).map(|j| format!("x{j}")).collect();
    }
    Ok(Dataset {
        rows,
        column_names,
        fault_labels: fault_column.then_some(labels),
        has_header,
    })
}

/// Write a dataset back to CSV with canonical float formatting. Missing
/// values become empty fields; labels become a trailing `fault` column.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .flexible(false)
        .from_path(path.as_ref())?;
    if dataset.has_header {
        let mut header = dataset.column_names.clone();
        if dataset.fault_labels.is_some() {
            header.push("fault".into());
        }
        writer.write_record(&header)?;
    }
    for (r, row) in dataset.rows.iter().enumerate() {
        let mut record: Vec<String> = (0..row.d())
            .map(|j| {
                if row.observed()[j] {
                    format!("{}", row.values()[j])
                } else {
                    String::new()
                }
            })
            .collect();
        if let Some(labels) = &dataset.fault_labels {
            record.push(if labels[r] { "1" } else { "0" }.into());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-column centering and scaling record, replayable at monitoring time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, s: &MaskedSample) -> Result<MaskedSample> {
        let mut values = s.values().clone();
        for j in 0..s.d() {
            if s.observed()[j] {
                values[j] = (values[j] - self.means[j]) / self.scales[j];
            }
        }
        MaskedSample::new(values, s.observed().to_vec())
    }
}

/// Center and scale each column using moments over observed entries only.
pub fn standardize(dataset: &Dataset) -> Result<(Dataset, Standardization)> {
    let d = dataset.d();
    let mut means = vec![0.0; d];
    let mut scales = vec![0.0; d];
    for j in 0..d {
        let observed: Vec<f64> = dataset
            .rows
            .iter()
            .filter(|r| r.observed()[j])
            .map(|r| r.values()[j])
            .collect();
        if observed.len() < 2 {
            return Err(Error::ZeroVarianceColumn(dataset.column_names[j].clone()));
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let var = observed.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
            / (observed.len() as f64 - 1.0);
        if var <= 0.0 {
            return Err(Error::ZeroVarianceColumn(dataset.column_names[j].clone()));
        }
        means[j] = mean;
        scales[j] = var.sqrt();
    }
    let record = Standardization { means, scales };
    let rows = dataset
        .rows
        .iter()
        .map(|r| record.apply(r))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Dataset {
            rows,
            column_names: dataset.column_names.clone(),
            fault_labels: dataset.fault_labels.clone(),
            has_header: dataset.has_header,
        },
        record,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PpcaRepr {
    d: usize,
    q: usize,
    /// Loading matrix, row-major: `w[row][col]`, d rows of q entries.
    w: Vec<Vec<f64>>,
    mu: Vec<f64>,
    sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MixtureRepr {
    k: usize,
    pi: Vec<f64>,
    locals: Vec<PpcaRepr>,
}

/// Persisted training output: mixture, thresholds, preprocessing record,
/// and the configuration it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub statistic_mode: StatisticMode,
    pub detection_mode: DetectionMode,
    mixture: MixtureRepr,
    pub thresholds: ThresholdSet,
    pub standardization: Option<Standardization>,
    pub training_config: TrainingConfig,
}

fn to_repr(m: &MixtureParams) -> MixtureRepr {
    MixtureRepr {
        k: m.k(),
        pi: m.pi().to_vec(),
        locals: m
            .locals()
            .iter()
            .map(|p| PpcaRepr {
                d: p.d(),
                q: p.q(),
                w: (0..p.d())
                    .map(|r| (0..p.q()).map(|c| p.w()[(r, c)]).collect())
                    .collect(),
                mu: p.mu().iter().copied().collect(),
                sigma2: p.sigma2(),
            })
            .collect(),
    }
}

fn from_repr(repr: &MixtureRepr) -> Result<MixtureParams> {
    if repr.locals.len() != repr.k {
        return Err(Error::SchemaViolation(format!(
            "k={} but {} local models present",
            repr.k,
            repr.locals.len()
        )));
    }
    let locals = repr
        .locals
        .iter()
        .map(|p| {
            if p.w.len() != p.d || p.w.iter().any(|row| row.len() != p.q) {
                return Err(Error::SchemaViolation(format!(
                    "loading matrix shape does not match d={} q={}",
                    p.d, p.q
                )));
            }
            if p.mu.len() != p.d {
                return Err(Error::SchemaViolation(format!(
                    "mean length {} does not match d={}",
                    p.mu.len(),
                    p.d
                )));
            }
            let w = DMatrix::from_fn(p.d, p.q, |r, c| p.w[r][c]);
            PpcaParams::new(w, DVector::from_vec(p.mu.clone()), p.sigma2)
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureParams::new(locals, repr.pi.clone())
        .map_err(|e| Error::SchemaViolation(e.to_string()))
}

impl ModelArtifact {
    pub fn new(
        mixture: &MixtureParams,
        thresholds: ThresholdSet,
        statistic_mode: StatisticMode,
        detection_mode: DetectionMode,
        standardization: Option<Standardization>,
        training_config: TrainingConfig,
    ) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            statistic_mode,
            detection_mode,
            mixture: to_repr(mixture),
            thresholds,
            standardization,
            training_config,
        }
    }

    pub fn mixture(&self) -> Result<MixtureParams> {
        from_repr(&self.mixture)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: ModelArtifact = serde_json::from_str(text)?;
        if artifact.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: MODEL_FORMAT_VERSION,
                got: artifact.format_version,
            });
        }
        // Parse-time invariant enforcement.
        artifact.mixture()?;
        Ok(artifact)
    }
}

pub fn write_model(artifact: &ModelArtifact, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, artifact.to_json()? + "\n")?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelArtifact> {
    ModelArtifact::from_json(&fs::read_to_string(path)?)
}
