//! Learned feature graphs as JSON and Graphviz DOT.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Scalar, Tensor};
use crate::block::ForwardCtx;
use crate::data::PreparedSplit;
use crate::graph_estimator::TopologyMode;
use crate::model::T2GFormer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub features: Vec<String>,
    pub variant: String,
    pub topology_mode: TopologyMode,
    pub frozen: bool,
    /// Rows the averages were taken over.
    pub rows: usize,
    pub layers: Vec<LayerGraph>,
}

/// Matrices are indexed `[target][source]`: row `i` lists the features that
/// feature `i` reads from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub layer: usize,
    pub graph_estimator: bool,
    /// Whether the adjacency is the same for every sample.
    pub static_topology: bool,
    /// Per-head adjacency. For sample-dependent topologies, the fraction of
    /// rows in which each edge is present.
    pub heads: Vec<Vec<Vec<f64>>>,
    /// Edge present in any head (and, for sample-dependent topologies, any row).
    pub union: Vec<Vec<bool>>,
    /// Interaction weights averaged over rows and heads.
    pub mean_weights: Vec<Vec<f64>>,
    /// Features the readout node may attend to in any head.
    pub readout_selected: Vec<bool>,
    /// Readout attention averaged over rows and heads.
    pub readout_weights: Vec<f64>,
}

struct Acc {
    heads: Vec<Vec<Vec<f64>>>,
    weights: Vec<Vec<f64>>,
    selected: Vec<bool>,
    readout: Vec<f64>,
    static_topology: bool,
}

fn add_adjacency(acc: &mut [Vec<Vec<f64>>], a: &Tensor<f64>, scale: f64) {
    let (h, n) = (acc.len(), acc[0].len());
    let k = a.shape()[0];
    for t in 0..k.max(h) {
        let src = &a.data()[(t % k) * n * n..(t % k + 1) * n * n];
        let head = &mut acc[t % h];
        for i in 0..n {
            for j in 0..n {
                head[i][j] += src[i * n + j] * scale;
            }
        }
    }
}

/// Runs the model in evaluation mode over `split` and collects each layer's
/// topology and average interaction weights.
pub fn export_graphs<F: Scalar>(
    model: &T2GFormer<F>,
    split: &PreparedSplit<F>,
    batch_size: usize,
) -> Result<GraphExport, AutodiffError> {
    let n = model.n_features();
    let rows = split.rows;
    let mut accs: Vec<Acc> = model
        .blocks
        .iter()
        .map(|b| Acc {
            heads: vec![vec![vec![0.0; n]; n]; b.spec.heads],
            weights: vec![vec![0.0; n]; n],
            selected: vec![false; n],
            readout: vec![0.0; n],
            static_topology: true,
        })
        .collect();
    let order: Vec<usize> = (0..rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (c, chunk) in order.chunks(batch_size.max(1)).enumerate() {
        let batch = split.batch(chunk);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, &mut ForwardCtx::eval(&mut rng))?;
        for ((acc, art), r) in accs.iter_mut().zip(&out.layers).zip(&out.readout) {
            let heads = acc.heads.len();
            let per_sample = heads * chunk.len();
            let a = to_f64(g.value(art.adjacency));
            // sample-dependent adjacencies are averaged; static ones are taken once
            if a.shape()[0] > heads {
                acc.static_topology = false;
                add_adjacency(&mut acc.heads, &a, 1.0 / rows as f64);
            } else if c == 0 {
                add_adjacency(&mut acc.heads, &a, 1.0);
            }
            let w = g.value(art.graph).to_f64();
            let scale = 1.0 / (rows * heads) as f64;
            for t in 0..per_sample {
                for i in 0..n {
                    for j in 0..n {
                        acc.weights[i][j] += w[(t * n + i) * n + j] * scale;
                    }
                }
            }
            let gate = g.value(r.gate).to_f64();
            for (k, v) in gate.iter().enumerate() {
                if *v != 0.0 {
                    acc.selected[k % n] = true;
                }
            }
            let rw = g.value(r.weights).to_f64();
            for (k, v) in rw.iter().enumerate() {
                acc.readout[k % n] += v * scale;
            }
        }
    }
    let layers = accs
        .into_iter()
        .enumerate()
        .map(|(l, acc)| {
            let spec = &model.blocks[l].spec;
            let self_loops = !spec.graph_estimator || spec.self_loops;
            let union = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| (self_loops || i != j) && acc.heads.iter().any(|h| h[i][j] > 0.0))
                        .collect()
                })
                .collect();
            LayerGraph {
                layer: l,
                graph_estimator: spec.graph_estimator,
                static_topology: acc.static_topology,
                heads: acc.heads,
                union,
                mean_weights: acc.weights,
                readout_selected: acc.selected,
                readout_weights: acc.readout,
            }
        })
        .collect();
    Ok(GraphExport {
        features: model.schema.feature_names(),
        variant: model.config.variant(),
        topology_mode: model.config.topology_mode,
        frozen: model.is_frozen(),
        rows,
        layers,
    })
}

fn to_f64<F: Scalar>(t: &Tensor<F>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.to_f64()).expect("same shape")
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

impl GraphExport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("export serializes")
    }

    /// One `digraph` for `layer`. Edges run source → target and are labelled
    /// with the mean interaction weight; readout-selected features are drawn
    /// with a double border.
    pub fn to_dot(&self, layer: usize) -> String {
        let lg = &self.layers[layer];
        let mut s = String::new();
        writeln!(s, "digraph layer{layer} {{").unwrap();
        writeln!(s, "  rankdir=LR;").unwrap();
        for (i, name) in self.features.iter().enumerate() {
            let extra = if lg.readout_selected[i] {
                format!(", peripheries=2, xlabel=\"{:.3}\"", lg.readout_weights[i])
            } else {
                String::new()
            };
            writeln!(s, "  f{i} [label=\"{}\"{extra}];", escape(name)).unwrap();
        }
        for (i, row) in lg.union.iter().enumerate() {
            for (j, &present) in row.iter().enumerate() {
                if present {
                    writeln!(s, "  f{j} -> f{i} [label=\"{:.3}\"];", lg.mean_weights[i][j]).unwrap();
                }
            }
        }
        s.push_str("}\n");
        s
    }
}
