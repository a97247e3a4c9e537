//! Dataset ingestion, schema handling, preprocessing and split management.

mod preprocess;
mod schema;
pub mod synthetic;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use preprocess::{
    quantile_normal, Batch, NumericPolicy, NumericTransform, PreparedDataset, PreparedSplit, PreparedTargets,
    PreprocessState, TargetScaler,
};
pub use schema::{FeatureInfo, FeatureKind, FeatureSchema, SchemaSpec, SplitSpec, Task};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed CSV: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: row {row}, column `{column}`: missing value")]
    MissingValue { path: PathBuf, row: usize, column: String },
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error("expected {expected} rows in total, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("class label `{label}` in split `{split}` does not occur in the training split")]
    UnknownClass { label: String, split: &'static str },
    #[error("schema: {0}")]
    Schema(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl RawTargets {
    pub fn len(&self) -> usize {
        match self {
            RawTargets::Classes(v) => v.len(),
            RawTargets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One split in original units. Categorical values are already indices.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSplit {
    pub rows: usize,
    /// Row-major `rows × n_numerical`.
    pub numerical: Vec<f64>,
    /// Row-major `rows × n_categorical`.
    pub categorical: Vec<usize>,
    pub targets: RawTargets,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub schema: FeatureSchema,
    pub train: RawSplit,
    pub val: RawSplit,
    pub test: RawSplit,
}

impl TabularDataset {
    pub fn split(&self, split: Split) -> &RawSplit {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut RawSplit {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn total_rows(&self) -> usize {
        self.train.rows + self.val.rows + self.test.rows
    }
}

struct Table {
    path: PathBuf,
    header: Vec<String>,
    records: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let csv_err = |e: csv::Error| DataError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        records.push(rec.iter().map(|s| s.trim().to_string()).collect());
    }
    Ok(Table {
        path: path.to_path_buf(),
        header,
        records,
    })
}

impl Table {
    fn column(&self, name: &str) -> Result<usize, DataError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn {
                path: self.path.clone(),
                column: name.to_string(),
            })
    }

    fn subset(&self, rows: &[usize]) -> Table {
        Table {
            path: self.path.clone(),
            header: self.header.clone(),
            records: rows.iter().map(|&r| self.records[r].clone()).collect(),
        }
    }
}

fn is_missing(s: &str) -> bool {
    s.is_empty() || matches!(s.to_ascii_lowercase().as_str(), "na" | "nan" | "null" | "?")
}

/// Sorts labels numerically when every label parses as a number.
fn sorted_labels(labels: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = labels.into_iter().collect();
    if v.iter().all(|s| s.parse::<f64>().is_ok()) {
        v.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    v
}

/// Loads a dataset from a directory holding `train.csv`, `val.csv` and
/// `test.csv`, or from a single CSV file split by `spec.split`.
pub fn load_dataset(path: &Path, spec: &SchemaSpec) -> Result<TabularDataset, DataError> {
    if !path.exists() {
        return Err(DataError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        });
    }
    let (train, val, test) = if path.is_dir() {
        let file = |name: &str| {
            let p = path.join(format!("{name}.csv"));
            if !p.exists() && name == "val" {
                let alt = path.join("valid.csv");
                if alt.exists() {
                    return alt;
                }
            }
            p
        };
        (
            read_table(&file("train"))?,
            read_table(&file("val"))?,
            read_table(&file("test"))?,
        )
    } else {
        let table = read_table(path)?;
        let mut order: Vec<usize> = (0..table.records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.split.seed));
        let n = order.len();
        let n_test = (n as f64 * spec.split.test_fraction).round() as usize;
        let n_val = ((n - n_test) as f64 * spec.split.val_fraction).round() as usize;
        let (test_rows, rest) = order.split_at(n_test);
        let (val_rows, train_rows) = rest.split_at(n_val);
        let sorted = |rows: &[usize]| {
            let mut r = rows.to_vec();
            r.sort_unstable();
            table.subset(&r)
        };
        (sorted(train_rows), sorted(val_rows), sorted(test_rows))
    };
    build_dataset(spec, [train, val, test])
}

fn build_dataset(spec: &SchemaSpec, tables: [Table; 3]) -> Result<TabularDataset, DataError> {
    let [train, val, test] = tables;
    for (table, split) in [(&train, Split::Train), (&val, Split::Val), (&test, Split::Test)] {
        if table.records.is_empty() {
            return Err(DataError::EmptySplit(split.name()));
        }
    }

    let mut vocabs = Vec::with_capacity(spec.categorical.len());
    for name in &spec.categorical {
        let col = train.column(name)?;
        let values: BTreeSet<String> = train.records.iter().map(|r| r[col].clone()).collect();
        vocabs.push(values.into_iter().collect::<Vec<_>>());
    }
    let classes = if spec.task.is_classification() {
        let col = train.column(&spec.target)?;
        sorted_labels(train.records.iter().map(|r| r[col].clone()).collect())
    } else {
        Vec::new()
    };

    let mut features: Vec<FeatureInfo> = spec
        .numerical
        .iter()
        .map(|n| FeatureInfo {
            name: n.clone(),
            kind: FeatureKind::Numerical,
        })
        .collect();
    features.extend(spec.categorical.iter().zip(&vocabs).map(|(n, v)| FeatureInfo {
        name: n.clone(),
        kind: FeatureKind::Categorical { vocab: v.clone() },
    }));
    let schema = FeatureSchema {
        name: spec.name.clone(),
        task: spec.task,
        target: spec.target.clone(),
        features,
        classes,
    };

    let parse = |table: &Table, split: Split| parse_split(spec, &schema, &vocabs, table, split);
    let dataset = TabularDataset {
        train: parse(&train, Split::Train)?,
        val: parse(&val, Split::Val)?,
        test: parse(&test, Split::Test)?,
        schema: schema.clone(),
    };
    if let Some(expected) = spec.expected_rows {
        if dataset.total_rows() != expected {
            return Err(DataError::RowCount {
                expected,
                found: dataset.total_rows(),
            });
        }
    }
    Ok(dataset)
}

fn parse_split(
    spec: &SchemaSpec,
    schema: &FeatureSchema,
    vocabs: &[Vec<String>],
    table: &Table,
    split: Split,
) -> Result<RawSplit, DataError> {
    let num_cols: Vec<usize> = spec.numerical.iter().map(|c| table.column(c)).collect::<Result<_, _>>()?;
    let cat_cols: Vec<usize> = spec.categorical.iter().map(|c| table.column(c)).collect::<Result<_, _>>()?;
    let target_col = table.column(&spec.target)?;
    let codes: Vec<Option<HashMap<&str, usize>>> = spec
        .numerical
        .iter()
        .map(|c| {
            spec.numeric_codes
                .get(c)
                .map(|vals| vals.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect())
        })
        .collect();
    let vocab_maps: Vec<HashMap<&str, usize>> = vocabs
        .iter()
        .map(|v| v.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect())
        .collect();
    let class_map: HashMap<&str, usize> = schema
        .classes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let rows = table.records.len();
    let mut numerical = Vec::with_capacity(rows * num_cols.len());
    let mut categorical = Vec::with_capacity(rows * cat_cols.len());
    let mut class_targets = Vec::new();
    let mut value_targets = Vec::new();
    for (r, rec) in table.records.iter().enumerate() {
        // header is line 1
        let line = r + 2;
        for (k, &c) in num_cols.iter().enumerate() {
            let raw = rec[c].as_str();
            let column = &spec.numerical[k];
            if is_missing(raw) {
                return Err(DataError::MissingValue {
                    path: table.path.clone(),
                    row: line,
                    column: column.clone(),
                });
            }
            let v = match codes[k].as_ref().and_then(|m| m.get(raw)) {
                Some(&code) => code as f64,
                None => raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| DataError::Parse {
                    path: table.path.clone(),
                    row: line,
                    column: column.clone(),
                    value: raw.to_string(),
                })?,
            };
            numerical.push(v);
        }
        for (k, &c) in cat_cols.iter().enumerate() {
            let unknown = vocabs[k].len();
            categorical.push(vocab_maps[k].get(rec[c].as_str()).copied().unwrap_or(unknown));
        }
        let raw = rec[target_col].as_str();
        if is_missing(raw) {
            return Err(DataError::MissingValue {
                path: table.path.clone(),
                row: line,
                column: spec.target.clone(),
            });
        }
        if spec.task.is_classification() {
            let class = class_map.get(raw).copied().ok_or_else(|| DataError::UnknownClass {
                label: raw.to_string(),
                split: split.name(),
            })?;
            class_targets.push(class);
        } else {
            value_targets.push(raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                DataError::Parse {
                    path: table.path.clone(),
                    row: line,
                    column: spec.target.clone(),
                    value: raw.to_string(),
                }
            })?);
        }
    }
    Ok(RawSplit {
        rows,
        numerical,
        categorical,
        targets: if spec.task.is_classification() {
            RawTargets::Classes(class_targets)
        } else {
            RawTargets::Values(value_targets)
        },
    })
}

/// Writes a dataset back to `{train,val,test}.csv` in `dir`, using the
/// schema's column names. Categorical and class indices are written as
/// their labels; unknown categories as `__unknown__`.
pub fn write_split_dir(dataset: &TabularDataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let schema = &dataset.schema;
    let nn = schema.n_numerical();
    let nc = schema.n_categorical();
    for split in Split::ALL {
        let path = dir.join(format!("{}.csv", split.name()));
        let mut w = csv::Writer::from_path(&path).map_err(|e| DataError::Csv {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let mut header = schema.feature_names();
        header.push(schema.target.clone());
        let csv_err = |e: csv::Error| DataError::Csv {
            path: path.clone(),
            message: e.to_string(),
        };
        w.write_record(&header).map_err(csv_err)?;
        let s = dataset.split(split);
        for r in 0..s.rows {
            let mut rec: Vec<String> = s.numerical[r * nn..(r + 1) * nn].iter().map(|v| v.to_string()).collect();
            for (k, f) in schema.features[nn..].iter().enumerate() {
                let FeatureKind::Categorical { vocab } = &f.kind else { unreachable!() };
                let ix = s.categorical[r * nc + k];
                rec.push(vocab.get(ix).cloned().unwrap_or_else(|| "__unknown__".into()));
            }
            rec.push(match &s.targets {
                RawTargets::Classes(c) => schema.classes[c[r]].clone(),
                RawTargets::Values(v) => v[r].to_string(),
            });
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|source| DataError::Io { path: path.clone(), source })?;
    }
    Ok(())
}
