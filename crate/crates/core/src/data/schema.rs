use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binclass,
    Multiclass,
    Regression,
}

impl Task {
    pub fn is_classification(self) -> bool {
        !matches!(self, Task::Regression)
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Regression => "rmse",
            _ => "accuracy",
        }
    }

    /// Whether a larger metric value is better.
    pub fn higher_is_better(self) -> bool {
        self.is_classification()
    }
}

/// Holdout fractions used when a dataset comes as a single CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Fraction of the remaining rows that goes to validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_val_fraction() -> f64 {
    0.2
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: default_test_fraction(),
            val_fraction: default_val_fraction(),
            seed: 0,
        }
    }
}

/// User-facing description of a CSV dataset: which columns play which role.
///
/// ```toml
/// name = "california_housing"
/// task = "regression"
/// target = "MedHouseVal"
/// numerical = ["MedInc", "HouseAge"]
/// categorical = []
/// ignore = []
/// expected_rows = 20640
/// batch_size = 256
///
/// [numeric_codes]
/// Gender = ["Female", "Male"]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaSpec {
    pub name: String,
    pub task: Task,
    pub target: String,
    #[serde(default)]
    pub numerical: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Columns present in the file but not used.
    #[serde(default)]
    pub ignore: Vec<String>,
    /// Numerical columns stored as strings: value → position in the list.
    #[serde(default)]
    pub numeric_codes: BTreeMap<String, Vec<String>>,
    /// Total row count over all splits, checked at load time when set.
    #[serde(default)]
    pub expected_rows: Option<usize>,
    /// Recommended training batch size.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub split: SplitSpec,
}

const BUNDLED_CALIFORNIA: &str = include_str!("../../schemas/california.toml");
const BUNDLED_CHURN: &str = include_str!("../../schemas/churn.toml");

impl SchemaSpec {
    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        let spec: SchemaSpec = toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Bundled spec by short name (`california`/`ca`, `churn`/`ch`).
    pub fn bundled(name: &str) -> Option<Self> {
        let text = match name.to_ascii_lowercase().as_str() {
            "california" | "california_housing" | "ca" => BUNDLED_CALIFORNIA,
            "churn" | "churn_modelling" | "ch" => BUNDLED_CHURN,
            _ => return None,
        };
        Some(Self::from_toml(text).expect("bundled schema is valid"))
    }

    /// Bundled name or path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self, DataError> {
        if let Some(spec) = Self::bundled(name_or_path) {
            return Ok(spec);
        }
        let path = Path::new(name_or_path);
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn n_features(&self) -> usize {
        self.numerical.len() + self.categorical.len()
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.n_features() == 0 {
            return Err(DataError::Schema("schema declares no feature columns".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in self
            .numerical
            .iter()
            .chain(&self.categorical)
            .chain(std::iter::once(&self.target))
        {
            if !seen.insert(c) {
                return Err(DataError::Schema(format!("column `{c}` is assigned more than one role")));
            }
        }
        for c in self.numeric_codes.keys() {
            if !self.numerical.contains(c) {
                return Err(DataError::Schema(format!("numeric_codes names `{c}`, which is not numerical")));
            }
        }
        let s = &self.split;
        if !(0.0..1.0).contains(&s.test_fraction) || !(0.0..1.0).contains(&s.val_fraction) {
            return Err(DataError::Schema("split fractions must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Numerical,
    /// Vocabulary seen in the training split; index `vocab.len()` is the
    /// unknown slot.
    Categorical { vocab: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

/// Resolved column layout of a loaded dataset. Features are ordered
/// numerical first, then categorical, each in spec order; this is the token
/// order of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub name: String,
    pub task: Task,
    pub target: String,
    pub features: Vec<FeatureInfo>,
    /// Class labels for classification targets, index = class id.
    pub classes: Vec<String>,
}

impl FeatureSchema {
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn n_numerical(&self) -> usize {
        self.features
            .iter()
            .filter(|f| matches!(f.kind, FeatureKind::Numerical))
            .count()
    }

    pub fn n_categorical(&self) -> usize {
        self.n_features() - self.n_numerical()
    }

    /// Table sizes per categorical feature, including the unknown row.
    pub fn cat_cardinalities(&self) -> Vec<usize> {
        self.features
            .iter()
            .filter_map(|f| match &f.kind {
                FeatureKind::Categorical { vocab } => Some(vocab.len() + 1),
                FeatureKind::Numerical => None,
            })
            .collect()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    /// Model output width: class count, or 1 for regression.
    pub fn n_outputs(&self) -> usize {
        if self.task.is_classification() {
            self.classes.len()
        } else {
            1
        }
    }

    /// Stable hash of everything a trained model depends on.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}
