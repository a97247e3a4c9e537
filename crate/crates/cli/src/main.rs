use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use t2g_core::autodiff::{OpKind, Precision, Scalar};
use t2g_core::data::{load_dataset, PreparedDataset, PreparedSplit, SchemaSpec, Split, TabularDataset};
use t2g_core::export::export_graphs;
use t2g_core::gradcheck::gradcheck;
use t2g_core::model::{Checkpoint, ModelConfig, T2GFormer};
use t2g_core::training::{evaluate, train, write_history, TrainError};

mod config;

use config::{load_gradcheck, resolve_output, RunConfig};

/// Bad configuration, missing files or unusable data. Exits with code 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Parser)]
#[command(name = "t2g", version, about = "Graph-gated Transformer for tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and summarize test metrics.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set model.heads=4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Train seeds on parallel threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split directory or CSV file.
        #[arg(long)]
        data: PathBuf,
        /// Schema name or file; defaults to the bundled schema of the checkpoint's dataset.
        #[arg(long)]
        schema: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the metric JSON here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write learned feature graphs as JSON and per-layer DOT files.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: Option<String>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Rows of the split used as the reference batch.
        #[arg(long, default_value_t = 512)]
        rows: usize,
        /// Output directory.
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck {
        /// Optional TOML file with gradient-check settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Corrupt the backward rule of one operation (harness self-test).
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
        /// Write the JSON report here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train every combination of the config's `[sweep]` lists.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        parallel: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<InputError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            config,
            overrides,
            parallel,
        } => {
            let rc = RunConfig::load(&config, &overrides)?;
            let data = load_data(&rc.data.schema, &rc.data.path)?;
            prepare_output(&rc.output_dir, &rc)?;
            let summary = train_point(&rc, &rc.model, &data, &rc.output_dir, parallel)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Sweep {
            config,
            overrides,
            parallel,
        } => {
            let rc = RunConfig::load(&config, &overrides)?;
            let data = load_data(&rc.data.schema, &rc.data.path)?;
            prepare_output(&rc.output_dir, &rc)?;
            let mut rows = Vec::new();
            for (label, model) in rc.sweep_points()? {
                log::info!("sweep point {label}");
                let dir = rc.output_dir.join(&label);
                let summary = train_point(&rc, &model, &data, &dir, parallel)?;
                rows.push((label, summary));
            }
            let table = comparison_table(&rows);
            std::fs::write(rc.output_dir.join("comparison.md"), &table)?;
            let json: Vec<_> = rows
                .iter()
                .map(|(label, s)| serde_json::json!({ "label": label, "summary": s }))
                .collect();
            write_json(&rc.output_dir.join("comparison.json"), &json)?;
            print!("{table}");
        }
        Command::Eval {
            checkpoint,
            data,
            schema,
            split,
            output,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let dataset = load_for_checkpoint(&ck, schema.as_deref(), &data)?;
            let split = parse_split(&split)?;
            let result = match ck.precision {
                Precision::F32 => eval_checkpoint::<f32>(&ck, &dataset, split),
                Precision::F64 => eval_checkpoint::<f64>(&ck, &dataset, split),
            }?;
            let text = serde_json::to_string_pretty(&result)?;
            if let Some(path) = output {
                write_atomic(&path, text.as_bytes())?;
            }
            println!("{text}");
        }
        Command::ExportGraph {
            checkpoint,
            data,
            schema,
            split,
            rows,
            output,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let dataset = load_for_checkpoint(&ck, schema.as_deref(), &data)?;
            let split = parse_split(&split)?;
            let output = resolve_output(&output);
            let files = match ck.precision {
                Precision::F32 => export_checkpoint::<f32>(&ck, &dataset, split, rows, &output),
                Precision::F64 => export_checkpoint::<f64>(&ck, &dataset, split, rows, &output),
            }?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Gradcheck {
            config,
            overrides,
            inject_fault,
            output,
        } => {
            let gc = load_gradcheck(config.as_deref(), &overrides)?;
            let fault = inject_fault
                .map(|op| {
                    serde_json::from_value::<OpKind>(serde_json::Value::String(op.clone()))
                        .map_err(|_| InputError(format!("unknown operation `{op}`")))
                })
                .transpose()?;
            let report = gradcheck(&gc, fault)?;
            println!("{:<36} {:>8} {:>12} {:>12}", "parameter", "elements", "max rel err", "max |grad|");
            for p in &report.params {
                let mark = if p.max_rel_error < report.tolerance { "" } else { "  <-- FAIL" };
                println!(
                    "{:<36} {:>8} {:>12.3e} {:>12.3e}{mark}",
                    p.name, p.elements, p.max_rel_error, p.max_abs_grad
                );
            }
            for g in &report.groups {
                println!(
                    "group {:<30} {:>8} {:>12.3e} {:>12.3e}",
                    g.group, g.elements, g.max_rel_error, g.max_abs_grad
                );
            }
            if let Some(path) = output {
                write_json(&path, &report)?;
            }
            if report.passed {
                println!("gradcheck passed: max relative error {:.3e} < {:.0e}", report.max_rel_error, report.tolerance);
            } else {
                let names: Vec<&str> = report.offending().iter().map(|p| p.name.as_str()).collect();
                println!("gradcheck FAILED: {}", names.join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_split(name: &str) -> Result<Split> {
    Ok(Split::parse(name).ok_or_else(|| InputError(format!("unknown split `{name}` (train, val or test)")))?)
}

fn load_data(schema: &str, path: &Path) -> Result<TabularDataset> {
    let spec = SchemaSpec::resolve(schema).map_err(|e| InputError(format!("schema `{schema}`: {e}")))?;
    if !path.exists() {
        return Err(InputError(format!("dataset path {} does not exist", path.display())).into());
    }
    Ok(load_dataset(path, &spec).map_err(|e| InputError(format!("cannot load dataset {}: {e}", path.display())))?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path).map_err(|e| InputError(e.to_string()))?)
}

fn load_for_checkpoint(ck: &Checkpoint, schema: Option<&str>, data: &Path) -> Result<TabularDataset> {
    let name = schema.unwrap_or(&ck.schema.name);
    load_data(name, data)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Writes through a temporary file so readers never see partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn prepare_output(dir: &Path, rc: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| InputError(format!("cannot create output directory {}: {e}", dir.display())))?;
    write_json(&dir.join("run_config.json"), rc)
}

#[derive(Clone, Debug, Serialize)]
struct SeedReport {
    seed: u64,
    parameters: usize,
    best_epoch: usize,
    epochs_run: usize,
    freeze_epoch: Option<usize>,
    val_metric: f64,
    test_metric: f64,
    test_loss: f64,
}

#[derive(Clone, Debug, Serialize)]
struct Stat {
    mean: f64,
    std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (zero for a single value).
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, Serialize)]
struct Summary {
    dataset: String,
    metric: &'static str,
    variant: String,
    parameters: usize,
    seeds: Vec<u64>,
    test: Stat,
    val: Stat,
    runs: Vec<SeedReport>,
}

fn train_point(rc: &RunConfig, model: &ModelConfig, data: &TabularDataset, dir: &Path, parallel: bool) -> Result<Summary> {
    std::fs::create_dir_all(dir)?;
    let point = RunConfig {
        model: model.clone(),
        output_dir: dir.to_path_buf(),
        ..rc.clone()
    };
    if dir != rc.output_dir {
        write_json(&dir.join("run_config.json"), &point)?;
    }
    let run_seed = |seed: u64| match rc.precision {
        Precision::F32 => train_seed::<f32>(&point, data, seed, dir),
        Precision::F64 => train_seed::<f64>(&point, data, seed, dir),
    };
    let runs: Vec<SeedReport> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = rc.seeds.iter().map(|&seed| s.spawn(move || run_seed(seed))).collect();
            handles.into_iter().map(|h| h.join().expect("seed thread panicked")).collect::<Result<_>>()
        })?
    } else {
        rc.seeds.iter().map(|&seed| run_seed(seed)).collect::<Result<_>>()?
    };
    let test: Vec<f64> = runs.iter().map(|r| r.test_metric).collect();
    let val: Vec<f64> = runs.iter().map(|r| r.val_metric).collect();
    let summary = Summary {
        dataset: data.schema.name.clone(),
        metric: data.schema.task.metric_name(),
        variant: model.variant(),
        parameters: runs[0].parameters,
        seeds: rc.seeds.clone(),
        test: Stat::of(&test),
        val: Stat::of(&val),
        runs,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn train_seed<F: Scalar>(rc: &RunConfig, data: &TabularDataset, seed: u64, dir: &Path) -> Result<SeedReport> {
    let seed_dir = dir.join(format!("seed-{seed}"));
    std::fs::create_dir_all(&seed_dir)?;
    let prep = PreparedDataset::<F>::fit_transform(data, rc.data.numeric_policy);
    let mut model = T2GFormer::<F>::new(&data.schema, rc.model.clone(), seed).map_err(|e| InputError(e.to_string()))?;
    let mut tc = rc.train.clone();
    tc.seed = seed;
    let outcome = train(&mut model, &prep, &tc, &mut |r, _| {
        let val = r.val.map(|v| format!(" val {:.5}", v.metric)).unwrap_or_default();
        let frozen = if r.froze_now { " (topology frozen)" } else { "" };
        log::info!("seed {seed} epoch {} train loss {:.5}{val}{frozen}", r.epoch, r.train_loss);
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            step,
            reason,
            history,
        }) => {
            write_history(&history, &seed_dir.join("history.jsonl"))?;
            bail!("seed {seed}: training diverged at epoch {epoch}, step {step}: {reason}");
        }
        Err(e) => return Err(e.into()),
    };
    write_history(&outcome.history, &seed_dir.join("history.jsonl"))?;
    let mut ck = model.to_checkpoint(Some(&prep.state));
    ck.epoch = Some(outcome.best_epoch);
    ck.save(&seed_dir.join("checkpoint.json"))?;
    let report = SeedReport {
        seed,
        parameters: model.parameter_count(),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        freeze_epoch: outcome.freeze_epoch,
        val_metric: outcome.best_val_metric,
        test_metric: outcome.test.metric,
        test_loss: outcome.test.loss,
    };
    write_json(&seed_dir.join("report.json"), &report)?;
    Ok(report)
}

fn comparison_table(rows: &[(String, Summary)]) -> String {
    let metric = rows.first().map(|r| r.1.metric).unwrap_or("metric");
    let mut s = format!("| config | parameters | val {metric} | test {metric} |\n|---|---:|---:|---:|\n");
    for (label, sum) in rows {
        s.push_str(&format!(
            "| {label} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
            sum.parameters, sum.val.mean, sum.val.std, sum.test.mean, sum.test.std
        ));
    }
    s
}

fn model_for<F: Scalar>(ck: &Checkpoint, data: &TabularDataset) -> Result<(T2GFormer<F>, PreparedDataset<F>)> {
    let model = T2GFormer::<F>::from_checkpoint(ck)?;
    model.check_schema(&data.schema).map_err(|e| InputError(format!("checkpoint does not match the dataset: {e}")))?;
    let state = ck
        .preprocessing
        .as_ref()
        .ok_or_else(|| InputError("checkpoint has no preprocessing state".into()))?;
    Ok((model, state.prepare::<F>(data)))
}

#[derive(Serialize)]
struct EvalResult {
    dataset: String,
    split: Split,
    rows: usize,
    metric: &'static str,
    value: f64,
    loss: f64,
}

fn eval_checkpoint<F: Scalar>(ck: &Checkpoint, data: &TabularDataset, split: Split) -> Result<EvalResult> {
    let (model, prep) = model_for::<F>(ck, data)?;
    let s: &PreparedSplit<F> = prep.split(split);
    let e = evaluate(&model, s, &prep.state, 512)?;
    Ok(EvalResult {
        dataset: data.schema.name.clone(),
        split,
        rows: s.rows,
        metric: data.schema.task.metric_name(),
        value: e.metric,
        loss: e.loss,
    })
}

fn export_checkpoint<F: Scalar>(
    ck: &Checkpoint,
    data: &TabularDataset,
    split: Split,
    rows: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (model, prep) = model_for::<F>(ck, data)?;
    let reference = prep.split(split).head(rows.max(1));
    let export = export_graphs(&model, &reference, 512)?;
    let mut files = vec![out.join("graph.json")];
    write_atomic(&files[0], export.to_json().as_bytes())?;
    for l in 0..export.layers.len() {
        let path = out.join(format!("layer{l}.dot"));
        write_atomic(&path, export.to_dot(l).as_bytes())?;
        files.push(path);
    }
    Ok(files)
}
