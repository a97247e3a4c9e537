//! Losses, evaluation and the training loop with topology freezing and
//! early stopping.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamW, AdamWConfig, AutodiffError, Graph, OptimError, Scalar, Tensor, Var};
use crate::block::ForwardCtx;
use crate::data::{PreparedDataset, PreparedSplit, PreparedTargets, PreprocessState, Split, Task};
use crate::model::{ModelError, T2GFormer};

/// Stream ids derived from the run seed.
pub const SHUFFLE_STREAM: u64 = 1;
pub const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_column_embedding: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Stop after this many consecutive evaluations without improvement.
    pub early_stop_patience: usize,
    /// Freeze the topology after this many consecutive evaluations without
    /// improvement; `None` disables the trigger.
    pub freeze_patience: Option<usize>,
    /// Freeze the topology at the end of this epoch regardless of progress.
    pub freeze_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            lr_backbone: opt.lr_backbone,
            lr_column_embedding: opt.lr_column_embedding,
            weight_decay: opt.weight_decay,
            batch_size: 256,
            eval_batch_size: 512,
            max_epochs: 200,
            eval_every: 1,
            early_stop_patience: 16,
            freeze_patience: Some(5),
            freeze_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr_backbone: self.lr_backbone,
            lr_column_embedding: self.lr_column_embedding,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.eval_every == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config(
                "batch sizes, eval_every and max_epochs must be positive".into(),
            ));
        }
        if !(self.lr_backbone > 0.0 && self.lr_column_embedding > 0.0 && self.weight_decay >= 0.0) {
            return Err(TrainError::Config("learning rates must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// One line of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub split: Split,
    /// Accuracy or RMSE in original units; `None` for training epochs.
    pub metric: Option<f64>,
    pub loss: Option<f64>,
    pub frozen: bool,
}

pub fn write_history(records: &[HistoryRecord], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: u64,
        reason: String,
        history: Vec<HistoryRecord>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean loss over a mini-batch: cross-entropy for classification, squared
/// error on standardized targets for regression.
pub fn loss<F: Scalar>(
    g: &mut Graph<F>,
    output: Var,
    split: &PreparedSplit<F>,
    indices: &[usize],
) -> Result<Var, AutodiffError> {
    match &split.targets {
        PreparedTargets::Classes(_) => g.cross_entropy(output, &split.class_targets(indices).unwrap()),
        PreparedTargets::Values { .. } => g.mse(output, &split.scaled_targets(indices).unwrap()),
    }
}

/// Fraction of rows whose highest logit is the target class (ties go to
/// the lowest index).
pub fn accuracy(logits: &[f64], classes: usize, targets: &[usize]) -> f64 {
    let hits = logits
        .chunks(classes)
        .zip(targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == t
        })
        .count();
    hits as f64 / targets.len().max(1) as f64
}

pub fn rmse(pred: &[f64], target: &[f64]) -> f64 {
    let n = target.len().max(1) as f64;
    (pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: f64,
    pub loss: f64,
}

/// Raw model outputs for every row of a split, `[rows, outputs]` as `f64`.
pub fn predict_split<F: Scalar>(
    model: &T2GFormer<F>,
    split: &PreparedSplit<F>,
    batch_size: usize,
) -> Result<Vec<f64>, AutodiffError> {
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..split.rows).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        out.extend(model.predict(&split.batch(chunk))?.to_f64());
    }
    Ok(out)
}

/// Accuracy, or RMSE in original target units, plus the mean training loss.
pub fn evaluate<F: Scalar>(
    model: &T2GFormer<F>,
    split: &PreparedSplit<F>,
    state: &PreprocessState,
    batch_size: usize,
) -> Result<Evaluation, AutodiffError> {
    let pred = predict_split(model, split, batch_size)?;
    Ok(match &split.targets {
        PreparedTargets::Classes(t) => {
            let c = pred.len() / t.len().max(1);
            let mut g = Graph::<f64>::new();
            let logits = g.constant(Tensor::new(vec![t.len(), c], pred.clone())?);
            let l = g.cross_entropy(logits, t)?;
            Evaluation {
                metric: accuracy(&pred, c, t),
                loss: g.value(l).data()[0],
            }
        }
        PreparedTargets::Values { scaled, original } => {
            let scaled: Vec<f64> = scaled.iter().map(|v| v.to_f64().unwrap()).collect();
            let unscaled: Vec<f64> = match &state.target {
                Some(s) => pred.iter().map(|&p| s.inverse(p)).collect(),
                None => pred.clone(),
            };
            let mse = rmse(&pred, &scaled).powi(2);
            Evaluation {
                metric: rmse(&unscaled, original),
                loss: mse,
            }
        }
    })
}

fn improved(task: Task, candidate: f64, best: Option<f64>) -> bool {
    match best {
        None => true,
        Some(b) if task.higher_is_better() => candidate > b,
        Some(b) => candidate < b,
    }
}

/// Passed to the observer after every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<Evaluation>,
    pub frozen: bool,
    /// Whether the topology was frozen at the end of this epoch.
    pub froze_now: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRecord>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub test: Evaluation,
    pub freeze_epoch: Option<usize>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Trains with mini-batch AdamW, validating every `eval_every` epochs, and
/// leaves the model at its best validation state.
///
/// Shuffling and dropout draw from separate streams of a ChaCha8 generator
/// seeded with `config.seed`, so identical inputs give identical histories.
pub fn train<F: Scalar>(
    model: &mut T2GFormer<F>,
    data: &PreparedDataset<F>,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochReport, &T2GFormer<F>),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model.check_schema(&data.schema)?;
    let task = data.schema.task;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut opt = AdamW::new(config.optimizer(), &model.store);

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::model::ModelState<F>)> = None;
    let mut since_best = 0usize;
    let mut freeze_epoch = model.is_frozen().then_some(0);
    let mut stopped_early = false;
    let mut epochs_run = 0;
    let train_split = &data.train;
    let mut order: Vec<usize> = (0..train_split.rows).collect();

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train_split.batch(chunk);
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch, &mut ForwardCtx::train(&mut dropout_rng))?;
            let l = loss(&mut g, out.output, train_split, chunk)?;
            let lv = g.value(l).data()[0].to_f64().unwrap();
            let diverged = |step: u64, reason: String, history: &[HistoryRecord]| TrainError::Diverged {
                epoch,
                step,
                reason,
                history: history.to_vec(),
            };
            if !lv.is_finite() {
                return Err(diverged(opt.steps_taken(), format!("loss is {lv}"), &history));
            }
            model.store.zero_grad();
            g.backward(l, &mut model.store)?;
            if let Err(OptimError::NonFiniteGradient { param, step }) = opt.step(&mut model.store) {
                return Err(diverged(step, format!("non-finite gradient in `{param}`"), &history));
            }
            loss_sum += lv * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_split.rows.max(1) as f64;
        history.push(HistoryRecord {
            epoch,
            split: Split::Train,
            metric: None,
            loss: Some(train_loss),
            frozen: model.is_frozen(),
        });

        let mut val = None;
        if epoch % config.eval_every == 0 || epoch == config.max_epochs {
            let e = evaluate(model, &data.val, &data.state, config.eval_batch_size)?;
            history.push(HistoryRecord {
                epoch,
                split: Split::Val,
                metric: Some(e.metric),
                loss: Some(e.loss),
                frozen: model.is_frozen(),
            });
            if improved(task, e.metric, best.as_ref().map(|b| b.0)) {
                best = Some((e.metric, epoch, model.state()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            val = Some(e);
        }

        let mut froze_now = false;
        if !model.is_frozen() {
            let by_patience = val.is_some() && config.freeze_patience.is_some_and(|p| since_best >= p);
            if by_patience || config.freeze_epoch == Some(epoch) {
                model.freeze_topology()?;
                freeze_epoch = Some(epoch);
                froze_now = true;
                log::info!("topology frozen after epoch {epoch}");
            }
        }
        observer(
            &EpochReport {
                epoch,
                train_loss,
                val,
                frozen: model.is_frozen(),
                froze_now,
            },
            model,
        );
        if val.is_some() && since_best >= config.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    let (best_val_metric, best_epoch, state) = best.expect("at least one evaluation ran");
    model.restore_state(&state);
    let test = evaluate(model, &data.test, &data.state, config.eval_batch_size)?;
    history.push(HistoryRecord {
        epoch: best_epoch,
        split: Split::Test,
        metric: Some(test.metric),
        loss: Some(test.loss),
        frozen: model.is_frozen(),
    });
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_metric,
        test,
        freeze_epoch,
        epochs_run,
        stopped_early,
    })
}

#[cfg(test)]
mod tests;
