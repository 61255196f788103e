//! Loading datasets from CSV, feature standardisation, fitted-model bundles
//! and atomic output writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drm::{BasisSpec, OslsDataset, Theta};
use crate::error::{OslsError, Result};

/// A CSV table of numeric features, optionally with an integer label column.
#[derive(Clone, Debug)]
pub struct LabeledTable {
    pub feature_names: Vec<String>,
    pub x: DMatrix<f64>,
    /// Raw label values when a label column was requested.
    pub labels: Option<Vec<i64>>,
}

fn parse_cell(value: &str, row: usize, column: &str) -> Result<f64> {
    value.trim().parse::<f64>().map_err(|_| {
        OslsError::InvalidInput(format!(
            "non-numeric value '{value}' at data row {row}, column '{column}'"
        ))
    })
}

/// Reads a headed CSV. All columns other than `label_column` are features.
/// When `features` is given, exactly those columns are read (in that order)
/// and any other non-label column is ignored.
pub fn load_table(
    path: &Path,
    label_column: Option<&str>,
    features: Option<&[String]>,
) -> Result<LabeledTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_idx = match label_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            OslsError::InvalidInput(format!("label column '{name}' not found in {}", path.display()))
        })?),
        None => None,
    };
    let feature_idx: Vec<usize> = match features {
        Some(names) => names
            .iter()
            .map(|n| {
                headers.iter().position(|h| h == n).ok_or_else(|| {
                    OslsError::InvalidInput(format!(
                        "feature column '{n}' missing from {}",
                        path.display()
                    ))
                })
            })
            .collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| Some(i) != label_idx).collect(),
    };
    if feature_idx.is_empty() {
        return Err(OslsError::InvalidInput(format!("{} has no feature columns", path.display())));
    }
    let mut values = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        for &c in &feature_idx {
            values.push(parse_cell(&record[c], r + 1, &headers[c])?);
        }
        if let (Some(idx), Some(l)) = (label_idx, labels.as_mut()) {
            let raw = record[idx].trim();
            let v = raw.parse::<i64>().map_err(|_| {
                OslsError::InvalidInput(format!(
                    "label '{raw}' at data row {} is not an integer",
                    r + 1
                ))
            })?;
            l.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(OslsError::InvalidInput(format!("{} has no data rows", path.display())));
    }
    Ok(LabeledTable {
        feature_names: feature_idx.iter().map(|&i| headers[i].clone()).collect(),
        x: DMatrix::from_row_slice(rows, feature_idx.len(), &values),
        labels,
    })
}

/// Sorted distinct raw labels; position `k` is the class index `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub labels: Vec<i64>,
}

impl LabelMap {
    pub fn from_labels(raw: &[i64]) -> Self {
        let mut labels = raw.to_vec();
        labels.sort_unstable();
        labels.dedup();
        Self { labels }
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, raw: i64) -> Result<usize> {
        self.labels
            .binary_search(&raw)
            .map_err(|_| OslsError::InvalidInput(format!("label {raw} was not seen in training")))
    }

    pub fn remap(&self, raw: &[i64]) -> Result<Vec<usize>> {
        raw.iter().map(|&v| self.index_of(v)).collect()
    }

    /// Raw label for class index `k`; `None` for the novel class.
    pub fn raw(&self, k: usize) -> Option<i64> {
        self.labels.get(k).copied()
    }
}

/// Per-column centring and scaling fitted on the training block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    pub fn fit(x: &DMatrix<f64>, names: &[String]) -> Result<Self> {
        let n = x.nrows() as f64;
        if x.nrows() < 2 {
            return Err(OslsError::InvalidInput("standardisation needs at least 2 rows".into()));
        }
        let mut mean = Vec::with_capacity(x.ncols());
        let mut sd = Vec::with_capacity(x.ncols());
        for c in 0..x.ncols() {
            let col = x.column(c);
            let m = col.sum() / n;
            let v = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            if !(v > 0.0) {
                return Err(OslsError::InvalidInput(format!(
                    "column '{}' has zero variance and cannot be standardised",
                    names.get(c).map_or("?", String::as_str)
                )));
            }
            mean.push(m);
            sd.push(v.sqrt());
        }
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(OslsError::DimensionMismatch { expected: self.mean.len(), found: x.ncols() });
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - self.mean[c]) / self.sd[c]))
    }
}

/// Training and test files turned into a dataset.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub dataset: OslsDataset,
    pub feature_names: Vec<String>,
    pub label_map: LabelMap,
    pub standardization: Option<Standardization>,
}

pub fn load_dataset(train: &Path, test: &Path, label: &str, standardize: bool) -> Result<LoadedData> {
    let train_table = load_table(train, Some(label), None)?;
    let test_table = load_table(test, None, Some(&train_table.feature_names))?;
    let raw = train_table.labels.as_deref().unwrap_or_default();
    let label_map = LabelMap::from_labels(raw);
    let y = label_map.remap(raw)?;
    let (train_x, test_x, standardization) = if standardize {
        let s = Standardization::fit(&train_table.x, &train_table.feature_names)?;
        (s.apply(&train_table.x)?, s.apply(&test_table.x)?, Some(s))
    } else {
        (train_table.x, test_table.x, None)
    };
    let dataset = OslsDataset::new(train_x, y, test_x, label_map.k())?;
    Ok(LoadedData { dataset, feature_names: train_table.feature_names, label_map, standardization })
}

/// Everything needed to reuse a fit on new rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub theta: Theta,
    pub basis: BasisSpec,
    pub feature_names: Vec<String>,
    pub label_map: LabelMap,
    pub standardization: Option<Standardization>,
    pub log_el: f64,
    pub converged: bool,
}

impl FittedModel {
    /// Features of `path` in model order, transformed as at fit time.
    pub fn load_features(&self, path: &Path, label: Option<&str>) -> Result<LabeledTable> {
        let mut table = load_table(path, label, Some(&self.feature_names))?;
        if let Some(s) = &self.standardization {
            table.x = s.apply(&table.x)?;
        }
        Ok(table)
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| OslsError::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Serialises `rows` as CSV with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| OslsError::InvalidInput(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Fields that change between otherwise identical runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VolatileInfo {
    pub started_unix_secs: u64,
    pub elapsed_secs: f64,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the canonical JSON of the run configuration.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    /// Output files relative to the output directory.
    pub files: Vec<String>,
    pub label_map: Option<LabelMap>,
    /// Excluded from reproducibility comparisons.
    pub volatile: VolatileInfo,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Result<Self> {
        let value = serde_json::to_value(config)?;
        // serde_json maps are ordered by key, so this is canonical.
        let config_hash = sha256_hex(&serde_json::to_vec(&value)?);
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config_hash,
            config: value,
            inputs: Vec::new(),
            files: Vec::new(),
            label_map: None,
            volatile: VolatileInfo::default(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputFile { path: path.to_path_buf(), sha256: file_sha256(path)? });
        Ok(())
    }
}

/// Collects output files and writes the manifest last.
pub struct ResultBundle {
    dir: PathBuf,
    started: Instant,
    pub manifest: Manifest,
}

impl ResultBundle {
    pub fn new(dir: &Path, manifest: Manifest) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), started: Instant::now(), manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        write_json(&self.dir.join(name), value)?;
        self.manifest.files.push(name.into());
        Ok(())
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        write_csv(&self.dir.join(name), rows)?;
        self.manifest.files.push(name.into());
        Ok(())
    }

    pub fn raw(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.manifest.files.push(name.into());
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let elapsed = self.started.elapsed();
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        self.manifest.volatile = VolatileInfo {
            started_unix_secs: now.saturating_sub(elapsed.as_secs()),
            elapsed_secs: elapsed.as_secs_f64(),
            threads: rayon::current_num_threads(),
        };
        self.manifest.files.sort();
        self.manifest.files.dedup();
        let path = self.dir.join("manifest.json");
        write_json(&path, &self.manifest)?;
        Ok(path)
    }
}

/// Reads a JSON scenario file: one scenario object or an array of them.
pub fn load_scenarios(path: &Path) -> Result<Vec<crate::sim::ScenarioSpec>> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let specs = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    Ok(specs)
}

/// Cost matrix from a headerless CSV of `K + 1` rows.
pub fn load_cost_matrix(path: &Path) -> Result<crate::classify::CostMatrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        rows.push(
            record
                .iter()
                .enumerate()
                .map(|(c, v)| parse_cell(v, r + 1, &format!("{}", c + 1)))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    crate::classify::CostMatrix::new(rows)
}

/// Ordered key/value pairs for small diagnostic outputs.
pub type Report = BTreeMap<String, serde_json::Value>;
