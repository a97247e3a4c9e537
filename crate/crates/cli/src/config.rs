//! Run configuration files and `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use t2g_core::autodiff::Precision;
use t2g_core::data::NumericPolicy;
use t2g_core::gradcheck::GradcheckConfig;
use t2g_core::graph_estimator::TopologyMode;
use t2g_core::model::ModelConfig;
use t2g_core::training::TrainConfig;

use crate::InputError;

pub const OUTPUT_ROOT_ENV: &str = "T2G_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Bundled schema name (`california`, `churn`) or path to a schema file.
    pub schema: String,
    /// Split directory with `train.csv`, `val.csv`, `test.csv`, or one CSV.
    pub path: PathBuf,
    #[serde(default)]
    pub numeric_policy: NumericPolicy,
}

/// Lists of values to cross in `sweep`. Empty lists leave the base config
/// untouched.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Graph variants such as `SwAt`.
    pub variant: Vec<String>,
    pub self_loops: Vec<bool>,
    pub topology_mode: Vec<TopologyMode>,
    pub per_layer_ge: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Applies `key.path=value` to a TOML tree. Values are parsed as TOML
/// literals, falling back to plain strings.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), InputError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| InputError(format!("override `{assignment}` is not of the form key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| InputError(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn read_table(path: &Path) -> Result<toml::Table, InputError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| InputError(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

/// Relative output directories live under `$T2G_OUTPUT_ROOT` when it is set.
pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

impl RunConfig {
    /// Reads `path`, applies overrides, resolves relative data paths
    /// against the config file's directory and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, InputError> {
        let mut table = read_table(path)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| InputError(format!("{}: {e}", path.display())))?;
        if config.data.path.is_relative() {
            if let Some(parent) = path.parent() {
                config.data.path = parent.join(&config.data.path);
            }
        }
        config.output_dir = resolve_output(&config.output_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), InputError> {
        if self.seeds.is_empty() {
            return Err(InputError("`seeds` must not be empty".into()));
        }
        self.train.validate().map_err(|e| InputError(e.to_string()))?;
        for v in &self.sweep.variant {
            ModelConfig::default()
                .set_variant(v)
                .map_err(|e| InputError(e.to_string()))?;
        }
        Ok(())
    }

    /// Every combination of the sweep lists, labelled, in a fixed order.
    pub fn sweep_points(&self) -> Result<Vec<(String, ModelConfig)>, InputError> {
        let mut points = vec![(String::new(), self.model.clone())];
        let s = &self.sweep;
        fn cross<T>(
            points: Vec<(String, ModelConfig)>,
            values: &[T],
            label: impl Fn(&T) -> String,
            apply: impl Fn(&mut ModelConfig, &T) -> Result<(), InputError>,
        ) -> Result<Vec<(String, ModelConfig)>, InputError> {
            if values.is_empty() {
                return Ok(points);
            }
            let mut out = Vec::new();
            for (name, base) in points {
                for v in values {
                    let mut c = base.clone();
                    apply(&mut c, v)?;
                    let sep = if name.is_empty() { "" } else { "_" };
                    out.push((format!("{name}{sep}{}", label(v)), c));
                }
            }
            Ok(out)
        }
        points = cross(points, &s.variant, |v| v.clone(), |c, v| {
            c.set_variant(v).map_err(|e| InputError(e.to_string()))
        })?;
        points = cross(points, &s.self_loops, |v| format!("loops-{}", if *v { "on" } else { "off" }), |c, v| {
            c.self_loops = *v;
            Ok(())
        })?;
        points = cross(points, &s.topology_mode, |v| v.name().to_string(), |c, v| {
            c.topology_mode = *v;
            Ok(())
        })?;
        points = cross(
            points,
            &s.per_layer_ge,
            |v| format!("ge-{}", v.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>()),
            |c, v| {
                c.per_layer_ge = Some(v.clone());
                Ok(())
            },
        )?;
        if points.len() == 1 && points[0].0.is_empty() {
            points[0].0 = points[0].1.variant();
        }
        Ok(points)
    }
}

/// Gradient-check settings, optionally from a TOML file of
/// [`GradcheckConfig`] fields.
pub fn load_gradcheck(path: Option<&Path>, overrides: &[String]) -> Result<GradcheckConfig, InputError> {
    let mut table = match path {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: GradcheckConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| InputError(format!("gradcheck config: {e}")))?;
    // the check is only meaningful on a tiny model
    if config.n_numerical + 2 > 6 || config.d_token > 32 || config.n_layers > 2 {
        return Err(InputError("gradcheck is limited to N <= 6, n <= 32 and at most 2 layers".into()));
    }
    Ok(config)
}
