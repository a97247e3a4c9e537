//! Finite-difference check of every parameter gradient of a small model.
//!
//! Hard gates are not differentiable, so the check compares the analytic
//! gradient against central differences of a smooth surrogate: the forward
//! at the base point records `hard - soft` for every gate, and perturbed
//! forwards replay `soft + offset`. At the base point the surrogate equals
//! the model, and its derivative is exactly the straight-through rule.
//! Gate rows that are empty at the base point are held empty.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, OpKind, ParamGroup, Tensor};
use crate::block::ForwardCtx;
use crate::data::{synthetic, NumericPolicy, PreparedDataset, PreparedSplit, Task};
use crate::graph_estimator::{Gates, TopologyMode};
use crate::model::{ModelConfig, ModelError, T2GFormer};
use crate::training;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub n_layers: usize,
    pub d_token: usize,
    pub heads: usize,
    pub rows: usize,
    /// Numerical features; two categorical features are added.
    pub n_numerical: usize,
    pub topology_mode: TopologyMode,
    pub variant: String,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_token: 16,
            heads: 4,
            rows: 8,
            n_numerical: 3,
            topology_mode: TopologyMode::Knowledge,
            variant: "SwAt".into(),
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub name: String,
    pub group: ParamGroup,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    /// Only reaches the loss through the hard topology gates.
    pub straight_through: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub loss: f64,
    /// Gate rows with no usable entry, held fixed by the surrogate.
    pub empty_gate_rows: usize,
    pub tolerance: f64,
    pub params: Vec<ParamReport>,
    /// Backbone, column-embedding and straight-through groups.
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub passed: bool,
    pub injected_fault: Option<OpKind>,
}

impl GradcheckReport {
    /// Parameters whose gradients disagree with finite differences.
    pub fn offending(&self) -> Vec<&ParamReport> {
        self.params.iter().filter(|p| !(p.max_rel_error < self.tolerance)).collect()
    }
}

fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn build(config: &GradcheckConfig, seed: u64) -> Result<(T2GFormer<f64>, PreparedSplit<f64>), ModelError> {
    let data = synthetic::mixed(Task::Regression, config.n_numerical, &[3, 4], 0, [config.rows, 1, 1], seed);
    let prep = PreparedDataset::<f64>::fit_transform(&data, NumericPolicy::Standard);
    let mut mc = ModelConfig {
        n_layers: config.n_layers,
        d_token: config.d_token,
        heads: config.heads,
        topology_mode: config.topology_mode,
        ..ModelConfig::default()
    };
    mc.set_variant(&config.variant)?;
    let model = T2GFormer::new(&data.schema, mc, seed)?;
    Ok((model, prep.train))
}

/// Compares analytic and central-difference gradients for every element of
/// every parameter. `fault` corrupts one backward rule of the analytic pass.
pub fn gradcheck(config: &GradcheckConfig, fault: Option<OpKind>) -> Result<GradcheckReport, ModelError> {
    let (mut model, split) = build(config, config.seed)?;
    let idx: Vec<usize> = (0..split.rows).collect();
    let batch = split.batch(&idx);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut g = Graph::new();
    if let Some(kind) = fault {
        g.inject_fault(kind);
    }
    let mut ctx = ForwardCtx {
        training: false,
        rng: &mut rng,
        gates: Gates::recording(),
    };
    let out = model.forward(&mut g, &batch, &mut ctx)?;
    let records = std::mem::replace(&mut ctx.gates, Gates::hard()).into_records();
    let empty_gate_rows = records
        .iter()
        .map(|r| {
            let c = *r.mask.shape().last().unwrap();
            r.mask.data().chunks(c).filter(|row| row.iter().all(|&m| m == 0.0)).count()
        })
        .sum();
    let l = training::loss(&mut g, out.output, &split, &idx)?;
    let loss = g.value(l).data()[0];
    model.store.zero_grad();
    g.backward(l, &mut model.store)?;

    let mut surrogate = |model: &T2GFormer<f64>| -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx {
            training: false,
            rng: &mut rng,
            gates: Gates::replaying(records.clone()),
        };
        let out = model.forward(&mut g, &batch, &mut ctx)?;
        let l = training::loss(&mut g, out.output, &split, &idx)?;
        Ok(g.value(l).data()[0])
    };

    let straight: Vec<usize> = (0..model.blocks.len())
        .flat_map(|l| model.blocks[l].topology_params().into_iter().chain(model.readout.topology_params(l)))
        .map(|id| id.index())
        .collect();
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = model.store.get(id).grad.clone();
        let mut max_rel = 0.0f64;
        for k in 0..analytic.len() {
            let base = model.store.get(id).data[k];
            model.store.get_mut(id).data[k] = base + config.step;
            let up = surrogate(&model)?;
            model.store.get_mut(id).data[k] = base - config.step;
            let down = surrogate(&model)?;
            model.store.get_mut(id).data[k] = base;
            let numeric = (up - down) / (2.0 * config.step);
            max_rel = max_rel.max(rel_error(analytic[k], numeric, config.floor));
        }
        let p = model.store.get(id);
        params.push(ParamReport {
            name: p.name().to_string(),
            group: p.group(),
            elements: p.numel(),
            max_rel_error: max_rel,
            max_abs_grad: analytic.iter().fold(0.0, |m, v| m.max(v.abs())),
            straight_through: straight.contains(&id.index()),
        });
    }

    let group = |name: &str, pick: &dyn Fn(&ParamReport) -> bool| {
        let sel: Vec<&ParamReport> = params.iter().filter(|p| pick(p)).collect();
        GroupReport {
            group: name.into(),
            elements: sel.iter().map(|p| p.elements).sum(),
            max_rel_error: sel.iter().fold(0.0, |m, p| m.max(p.max_rel_error)),
            max_abs_grad: sel.iter().fold(0.0, |m, p| m.max(p.max_abs_grad)),
        }
    };
    let groups = vec![
        group("backbone", &|p| p.group == ParamGroup::Backbone),
        group("column_embedding", &|p| p.group == ParamGroup::ColumnEmbedding),
        group("straight_through", &|p| p.straight_through),
    ];
    let max_rel_error = params.iter().fold(0.0f64, |m, p| m.max(p.max_rel_error));
    let st_live = groups[2].elements == 0 || groups[2].max_abs_grad > 0.0;
    Ok(GradcheckReport {
        seed: config.seed,
        loss,
        empty_gate_rows,
        tolerance: config.tolerance,
        params,
        groups,
        max_rel_error,
        passed: max_rel_error < config.tolerance && st_live && loss.is_finite(),
        injected_fault: fault,
    })
}

/// Gradient of `loss` at `theta` by central differences, for tests of
/// single operations.
pub fn central_difference(theta: &Tensor<f64>, step: f64, mut loss: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut t = theta.clone();
    (0..theta.numel())
        .map(|k| {
            let base = t.data()[k];
            t.data_mut()[k] = base + step;
            let up = loss(&t);
            t.data_mut()[k] = base - step;
            let down = loss(&t);
            t.data_mut()[k] = base;
            (up - down) / (2.0 * step)
        })
        .collect()
}
