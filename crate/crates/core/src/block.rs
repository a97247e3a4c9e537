//! One layer: graph-guided feature interaction, shortcut and feed-forward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::graph_estimator::{assemble, EdgeWeights, Gates, Symmetry, Topology, TopologyMode};
use crate::nn::{LayerNorm, Linear, ReGlu};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dropouts {
    pub attention: f64,
    pub ffn: f64,
    pub residual: f64,
}

impl Default for Dropouts {
    fn default() -> Self {
        Self {
            attention: 0.2,
            ffn: 0.1,
            residual: 0.0,
        }
    }
}

/// Per-forward state: training flag, dropout stream and gate evaluation.
pub struct ForwardCtx<'a, F> {
    pub training: bool,
    pub rng: &'a mut ChaCha8Rng,
    pub gates: Gates<F>,
}

impl<'a, F: Scalar> ForwardCtx<'a, F> {
    pub fn eval(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            training: false,
            rng,
            gates: Gates::hard(),
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng,
            gates: Gates::hard(),
        }
    }
}

/// Intermediate nodes of one layer, consumed by the readout and exports.
#[derive(Clone, Copy, Debug)]
pub struct LayerArtifacts {
    /// `[B, N, n]` tail encodings.
    pub tail: Var,
    /// `[B·H, N, m]` values.
    pub values: Var,
    /// `[B·H, N, N]` scaled edge scores.
    pub edge_scores: Var,
    /// Hard adjacency, `[H | B·H | 1, N, N]`.
    pub adjacency: Var,
    /// `[B·H, N, N]` assembled graph (before attention dropout).
    pub graph: Var,
    /// `[H, N, d]` normalized tail column embeddings (knowledge mode).
    pub tail_embeddings: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub d_token: usize,
    pub heads: usize,
    pub n_features: usize,
    pub d_embedding: usize,
    /// `false` swaps the graph estimator for plain attention.
    pub graph_estimator: bool,
    pub weight_symmetry: Symmetry,
    pub topology_symmetry: Symmetry,
    pub topology_mode: TopologyMode,
    pub self_loops: bool,
    pub threshold: f64,
    pub dropouts: Dropouts,
}

impl BlockSpec {
    /// Whether the layer gates interactions with a learned topology.
    pub fn gated(&self) -> bool {
        self.graph_estimator && self.topology_mode != TopologyMode::AllOnes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct T2GBlock {
    pub spec: BlockSpec,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub edges: EdgeWeights,
    /// `None` for plain attention layers.
    pub topology: Option<Topology>,
    pub value: Linear,
    pub out: Linear,
    pub ffn: ReGlu,
}

impl T2GBlock {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, prefix: &str, spec: BlockSpec, rng: &mut R) -> Self {
        let n = spec.d_token;
        let norm1 = LayerNorm::new(store, &format!("{prefix}.norm1"), n, rng);
        let (edges, topology) = if spec.graph_estimator {
            let edges = EdgeWeights::new(store, prefix, n, spec.heads, spec.weight_symmetry, true, rng);
            let topology = Topology::new(
                store,
                prefix,
                spec.topology_mode,
                spec.topology_symmetry,
                spec.heads,
                spec.n_features,
                spec.d_embedding,
                spec.threshold,
                rng,
            );
            (edges, Some(topology))
        } else {
            (EdgeWeights::new(store, prefix, n, spec.heads, Symmetry::Asymmetric, false, rng), None)
        };
        let value = Linear::new(store, &format!("{prefix}.w_value"), n, n, rng);
        let out = Linear::new(store, &format!("{prefix}.w_out"), n, n, rng);
        let norm2 = LayerNorm::new(store, &format!("{prefix}.norm2"), n, rng);
        let ffn = ReGlu::new(store, &format!("{prefix}.ffn"), n, rng);
        Self {
            spec,
            norm1,
            norm2,
            edges,
            topology,
            value,
            out,
            ffn,
        }
    }

    pub fn n_params(spec: &BlockSpec) -> usize {
        let n = spec.d_token;
        let graph = if spec.graph_estimator {
            EdgeWeights::n_params(n, spec.weight_symmetry, true)
                + Topology::n_params(
                    spec.topology_mode,
                    spec.topology_symmetry,
                    spec.heads,
                    spec.n_features,
                    spec.d_embedding,
                )
        } else {
            EdgeWeights::n_params(n, Symmetry::Asymmetric, false)
        };
        4 * n + graph + 2 * Linear::n_params(n, n) + ReGlu::n_params(n)
    }

    /// Parameters frozen with the topology.
    pub fn topology_params(&self) -> Vec<ParamId> {
        self.topology.as_ref().map(Topology::topology_params).unwrap_or_default()
    }

    /// Builds the hard adjacency of a static topology without any input.
    pub fn static_adjacency<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
    ) -> Result<Option<Var>, AutodiffError> {
        let Some(t) = self.topology.as_ref().filter(|t| t.mode.is_static()) else {
            return Ok(None);
        };
        let emb = t.normalized_embeddings(g, store);
        let unused = g.constant(Tensor::zeros(&[1]));
        t.hard_topology(g, store, unused, emb, !self.spec.self_loops, &mut Gates::hard()).map(Some)
    }

    /// `X_next = FFN(LN₂(H)) + drop(H)` with `H = W_out·(G·V) + drop(X)`.
    /// `frozen` replaces the learned adjacency by a cached one.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        ctx: &mut ForwardCtx<'_, F>,
        frozen: Option<&Tensor<F>>,
    ) -> Result<(Var, LayerArtifacts), AutodiffError> {
        let heads = self.spec.heads;
        let n = self.spec.d_token;
        let nf = g.shape(x)[1];
        let xn = self.norm1.forward(g, store, x)?;
        let (fh, ft) = self.edges.encode(g, store, xn)?;
        let edge_scores = self.edges.scores(g, store, fh, ft)?;

        let mut tail_embeddings = None;
        let (adjacency, self_loops) = match &self.topology {
            None => (g.constant(Tensor::full(&[1, nf, nf], F::one())), true),
            Some(t) => {
                let emb = if frozen.is_none() {
                    t.normalized_embeddings(g, store)
                } else {
                    None
                };
                tail_embeddings = emb.map(|(_, et)| et);
                let a = match frozen {
                    Some(cached) => g.constant(cached.clone()),
                    None => t.hard_topology(g, store, edge_scores, emb, !self.spec.self_loops, &mut ctx.gates)?,
                };
                (a, self.spec.self_loops)
            }
        };
        let graph = assemble(g, edge_scores, adjacency, self_loops)?;
        let attn = g.dropout(graph, self.spec.dropouts.attention, ctx.training, ctx.rng);

        let v = self.value.forward(g, store, xn)?;
        let values = g.split_heads(v, heads)?;
        let msg = g.bmm(attn, values, false)?;
        let msg = g.merge_heads(msg, heads)?;
        let msg = self.out.forward(g, store, msg)?;
        debug_assert_eq!(g.shape(msg)[2], n);

        let p = self.spec.dropouts.residual;
        let shortcut = g.dropout(x, p, ctx.training, ctx.rng);
        let h = g.add(msg, shortcut)?;
        let hn = self.norm2.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, hn, self.spec.dropouts.ffn, ctx.training, ctx.rng)?;
        let shortcut = g.dropout(h, p, ctx.training, ctx.rng);
        let out = g.add(f, shortcut)?;
        Ok((
            out,
            LayerArtifacts {
                tail: ft,
                values,
                edge_scores,
                adjacency,
                graph,
                tail_embeddings,
            },
        ))
    }
}
