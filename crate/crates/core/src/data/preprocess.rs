use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{FeatureSchema, RawSplit, RawTargets, Split, TabularDataset};
use crate::autodiff::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericPolicy {
    #[default]
    Standard,
    /// Empirical CDF of the training split followed by the normal quantile
    /// function.
    Quantile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NumericTransform {
    Standard { mean: f64, std: f64 },
    Quantile { references: Vec<f64> },
}

const QUANTILE_CLIP: f64 = 1e-7;
const MAX_QUANTILES: usize = 1000;

impl NumericTransform {
    fn fit_standard(values: &[f64], name: &str) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < 1e-12 {
            log::warn!("feature `{name}` has zero variance on the training split; leaving it unscaled");
            return NumericTransform::Standard { mean: 0.0, std: 1.0 };
        }
        NumericTransform::Standard { mean, std }
    }

    fn fit_quantile(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len().clamp(2, MAX_QUANTILES);
        let references = (0..k)
            .map(|i| {
                let pos = i as f64 / (k - 1) as f64 * (sorted.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
            })
            .collect();
        NumericTransform::Quantile { references }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match self {
            NumericTransform::Standard { mean, std } => (x - mean) / std,
            NumericTransform::Quantile { references } => quantile_normal(x, references),
        }
    }
}

/// Maps `x` through the empirical CDF given by `references` (quantiles at
/// evenly spaced levels) and then through the standard normal quantile
/// function. Ties in the references resolve to the middle of their level
/// range.
pub fn quantile_normal(x: f64, references: &[f64]) -> f64 {
    let k = references.len();
    let levels = |i: usize| i as f64 / (k - 1) as f64;
    let forward = interp(x, references, levels);
    let reversed: Vec<f64> = references.iter().rev().map(|v| -v).collect();
    let backward = 1.0 - interp(-x, &reversed, levels);
    let p = (0.5 * (forward + backward)).clamp(QUANTILE_CLIP, 1.0 - QUANTILE_CLIP);
    Normal::standard().inverse_cdf(p)
}

/// Piecewise-linear interpolation over increasing `xs`, clamped at the ends;
/// for repeated `xs` the first matching segment wins.
fn interp(x: f64, xs: &[f64], ys: impl Fn(usize) -> f64) -> f64 {
    let last = xs.len() - 1;
    if x <= xs[0] {
        return ys(0);
    }
    if x >= xs[last] {
        return ys(last);
    }
    let hi = xs.partition_point(|&v| v <= x).min(last);
    let lo = hi - 1;
    let span = xs[hi] - xs[lo];
    if span <= 0.0 {
        return ys(lo);
    }
    ys(lo) + (ys(hi) - ys(lo)) * (x - xs[lo]) / span
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn transform(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Statistics fitted on the training split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub policy: NumericPolicy,
    pub numeric: Vec<NumericTransform>,
    pub target: Option<TargetScaler>,
}

impl PreprocessState {
    pub fn fit(dataset: &TabularDataset, policy: NumericPolicy) -> Self {
        let train = &dataset.train;
        let nn = dataset.schema.n_numerical();
        let names = dataset.schema.feature_names();
        let numeric = (0..nn)
            .map(|j| {
                let col: Vec<f64> = (0..train.rows).map(|r| train.numerical[r * nn + j]).collect();
                match policy {
                    NumericPolicy::Standard => NumericTransform::fit_standard(&col, &names[j]),
                    NumericPolicy::Quantile => NumericTransform::fit_quantile(&col),
                }
            })
            .collect();
        let target = match &train.targets {
            RawTargets::Values(v) => {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let std = (v.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).sqrt();
                Some(TargetScaler {
                    mean,
                    std: if std < 1e-12 { 1.0 } else { std },
                })
            }
            RawTargets::Classes(_) => None,
        };
        Self {
            policy,
            numeric,
            target,
        }
    }

    pub fn transform_split<F: Scalar>(&self, raw: &RawSplit, schema: &FeatureSchema) -> PreparedSplit<F> {
        let nn = schema.n_numerical();
        let numerical = raw
            .numerical
            .iter()
            .enumerate()
            .map(|(k, &v)| F::lit(self.numeric[k % nn].apply(v)))
            .collect();
        let targets = match (&raw.targets, &self.target) {
            (RawTargets::Classes(c), _) => PreparedTargets::Classes(c.clone()),
            (RawTargets::Values(v), Some(s)) => PreparedTargets::Values {
                scaled: v.iter().map(|&y| F::lit(s.transform(y))).collect(),
                original: v.clone(),
            },
            (RawTargets::Values(v), None) => PreparedTargets::Values {
                scaled: v.iter().map(|&y| F::lit(y)).collect(),
                original: v.clone(),
            },
        };
        PreparedSplit {
            rows: raw.rows,
            n_numerical: nn,
            n_categorical: schema.n_categorical(),
            numerical,
            categorical: raw.categorical.clone(),
            targets,
        }
    }

    pub fn prepare<F: Scalar>(&self, dataset: &TabularDataset) -> PreparedDataset<F> {
        PreparedDataset {
            schema: dataset.schema.clone(),
            train: self.transform_split(&dataset.train, &dataset.schema),
            val: self.transform_split(&dataset.val, &dataset.schema),
            test: self.transform_split(&dataset.test, &dataset.schema),
            state: self.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PreparedTargets<F> {
    Classes(Vec<usize>),
    /// Standardized values for the loss plus the originals for reporting.
    Values { scaled: Vec<F>, original: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSplit<F> {
    pub rows: usize,
    pub n_numerical: usize,
    pub n_categorical: usize,
    pub numerical: Vec<F>,
    pub categorical: Vec<usize>,
    pub targets: PreparedTargets<F>,
}

/// Model input for a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub rows: usize,
    /// `[rows, n_numerical]`
    pub numerical: Tensor<F>,
    /// Row-major `rows × n_categorical`.
    pub categorical: Vec<usize>,
}

impl<F: Scalar> PreparedSplit<F> {
    pub fn batch(&self, indices: &[usize]) -> Batch<F> {
        let (nn, nc) = (self.n_numerical, self.n_categorical);
        let mut numerical = Vec::with_capacity(indices.len() * nn);
        let mut categorical = Vec::with_capacity(indices.len() * nc);
        for &r in indices {
            numerical.extend_from_slice(&self.numerical[r * nn..(r + 1) * nn]);
            categorical.extend_from_slice(&self.categorical[r * nc..(r + 1) * nc]);
        }
        Batch {
            rows: indices.len(),
            numerical: Tensor::new(vec![indices.len(), nn], numerical).expect("batch shape"),
            categorical,
        }
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> PreparedSplit<F> {
        let n = n.min(self.rows);
        let targets = match &self.targets {
            PreparedTargets::Classes(c) => PreparedTargets::Classes(c[..n].to_vec()),
            PreparedTargets::Values { scaled, original } => PreparedTargets::Values {
                scaled: scaled[..n].to_vec(),
                original: original[..n].to_vec(),
            },
        };
        PreparedSplit {
            rows: n,
            n_numerical: self.n_numerical,
            n_categorical: self.n_categorical,
            numerical: self.numerical[..n * self.n_numerical].to_vec(),
            categorical: self.categorical[..n * self.n_categorical].to_vec(),
            targets,
        }
    }

    pub fn class_targets(&self, indices: &[usize]) -> Option<Vec<usize>> {
        match &self.targets {
            PreparedTargets::Classes(c) => Some(indices.iter().map(|&i| c[i]).collect()),
            PreparedTargets::Values { .. } => None,
        }
    }

    pub fn scaled_targets(&self, indices: &[usize]) -> Option<Vec<F>> {
        match &self.targets {
            PreparedTargets::Values { scaled, .. } => Some(indices.iter().map(|&i| scaled[i]).collect()),
            PreparedTargets::Classes(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset<F> {
    pub schema: FeatureSchema,
    pub train: PreparedSplit<F>,
    pub val: PreparedSplit<F>,
    pub test: PreparedSplit<F>,
    pub state: PreprocessState,
}

impl<F: Scalar> PreparedDataset<F> {
    /// Fits preprocessing on the training split and applies it everywhere.
    pub fn fit_transform(dataset: &TabularDataset, policy: NumericPolicy) -> Self {
        PreprocessState::fit(dataset, policy).prepare(dataset)
    }

    pub fn split(&self, split: Split) -> &PreparedSplit<F> {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}
