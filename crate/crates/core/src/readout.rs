//! Cross-level readout: a global node that selects features at every layer
//! and accumulates their values, followed by the prediction head.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Init, ParamGroup, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::block::{ForwardCtx, LayerArtifacts, T2GBlock};
use crate::graph_estimator::{Gates, TopologyMode};
use crate::nn::{LayerNorm, Linear};

const COSINE_EPS: f64 = 1e-12;

/// Selection parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutLayer {
    /// `[H, d]` layer semantics (knowledge mode).
    pub semantics: Option<ParamId>,
    /// `[H, N]` free selection scores (free mode).
    pub free: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct ReadoutArtifacts {
    /// Selection gate, `[H | B·H | 1, 1, N]`.
    pub gate: Var,
    /// `[B·H, 1, N]` softmax weights over selected features.
    pub weights: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    pub z0: ParamId,
    pub layers: Vec<ReadoutLayer>,
}

impl Readout {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, blocks: &[T2GBlock], rng: &mut R) -> Self {
        let n = blocks.first().map(|b| b.spec.d_token).unwrap_or(1);
        let z0 = store.add("readout.z0", &[n], ParamGroup::Backbone, Init::Uniform(1.0 / (n as f64).sqrt()), rng);
        store.get_mut(z0).decay = false;
        let layers = blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let s = &b.spec;
                let mut layer = ReadoutLayer {
                    semantics: None,
                    free: None,
                };
                if s.graph_estimator {
                    let col = ParamGroup::ColumnEmbedding;
                    let id = match s.topology_mode {
                        TopologyMode::Knowledge => {
                            let bound = 1.0 / (s.d_embedding as f64).sqrt();
                            let id = store.add(
                                format!("readout.layer{l}.semantics"),
                                &[s.heads, s.d_embedding],
                                col,
                                Init::Uniform(bound),
                                rng,
                            );
                            layer.semantics = Some(id);
                            Some(id)
                        }
                        TopologyMode::Free => {
                            let id =
                                store.add(format!("readout.layer{l}.free"), &[s.heads, s.n_features], col, Init::Uniform(1.0), rng);
                            layer.free = Some(id);
                            Some(id)
                        }
                        TopologyMode::Adaptive | TopologyMode::AllOnes => None,
                    };
                    if let Some(id) = id {
                        store.get_mut(id).decay = false;
                    }
                }
                layer
            })
            .collect();
        Self { z0, layers }
    }

    pub fn n_params(blocks: &[crate::block::BlockSpec]) -> usize {
        let n = blocks.first().map(|b| b.d_token).unwrap_or(1);
        n + blocks
            .iter()
            .map(|s| match (s.graph_estimator, s.topology_mode) {
                (true, TopologyMode::Knowledge) => s.heads * s.d_embedding,
                (true, TopologyMode::Free) => s.heads * s.n_features,
                _ => 0,
            })
            .sum::<usize>()
    }

    pub fn topology_params(&self, layer: usize) -> Vec<ParamId> {
        let l = &self.layers[layer];
        [l.semantics, l.free].into_iter().flatten().collect()
    }

    /// `[B, n]` copies of `z0`.
    pub fn initial<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, rows: usize) -> Result<Var, AutodiffError> {
        let n = store.get(self.z0).numel();
        let zeros = g.constant(Tensor::zeros(&[rows, n]));
        let z0 = g.param(store, self.z0);
        g.add_row(zeros, z0)
    }

    /// Static selection gate `[H, 1, N]`, or `None` when it depends on the
    /// sample (adaptive mode) or selects everything.
    pub fn static_gate<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        layer: usize,
        block: &T2GBlock,
        gates: &mut Gates<F>,
    ) -> Result<Option<Var>, AutodiffError> {
        let Some(topology) = block.topology.as_ref() else {
            return Ok(None);
        };
        let (h, nf) = (block.spec.heads, block.spec.n_features);
        let scores = match topology.mode {
            TopologyMode::Knowledge => {
                let (_, et) = topology.normalized_embeddings(g, store).expect("knowledge embeddings");
                self.semantic_scores(g, store, layer, et)?
            }
            TopologyMode::Free => {
                let f = g.param(store, self.layers[layer].free.expect("free selection scores"));
                g.reshape(f, &[h, 1, nf])?
            }
            TopologyMode::Adaptive | TopologyMode::AllOnes => return Ok(None),
        };
        let soft = topology.soft(g, store, scores)?;
        gates.apply(g, soft, topology.threshold, false).map(Some)
    }

    fn semantic_scores<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        layer: usize,
        tail_embeddings: Var,
    ) -> Result<Var, AutodiffError> {
        let e = g.param(store, self.layers[layer].semantics.expect("layer semantics"));
        let shape = g.shape(e).to_vec();
        let e = g.l2_normalize(e, COSINE_EPS);
        let e = g.reshape(e, &[shape[0], 1, shape[1]])?;
        g.bmm(e, tail_embeddings, true)
    }

    /// One collection step: `r = softmax(α)ᵀV + z`, `z_next = FFN(r) + r`.
    /// `frozen` replaces the learned selection gate by a cached one.
    #[allow(clippy::too_many_arguments)]
    pub fn collect<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        z: Var,
        layer: usize,
        block: &T2GBlock,
        art: &LayerArtifacts,
        ctx: &mut ForwardCtx<'_, F>,
        frozen: Option<&Tensor<F>>,
    ) -> Result<(Var, ReadoutArtifacts), AutodiffError> {
        let spec = &block.spec;
        let (heads, n, nf) = (spec.heads, spec.d_token, spec.n_features);
        let rows = g.shape(z)[0];
        let m = n / heads;

        let hz = block.edges.head.forward(g, store, z)?;
        let hz = block.edges.relate(g, store, hz)?;
        let hz = g.reshape(hz, &[rows, 1, n])?;
        let hz = g.split_heads(hz, heads)?;
        let tail = g.split_heads(art.tail, heads)?;
        let alpha = g.bmm(hz, tail, true)?;
        let alpha = g.scale(alpha, F::lit(1.0 / (m as f64).sqrt()));

        let gate = match (frozen, block.topology.as_ref()) {
            (Some(cached), _) => g.constant(cached.clone()),
            (None, Some(t)) if spec.graph_estimator => match t.mode {
                TopologyMode::Knowledge => {
                    let et = art.tail_embeddings.expect("knowledge layer exposes embeddings");
                    let s = self.semantic_scores(g, store, layer, et)?;
                    let soft = t.soft(g, store, s)?;
                    ctx.gates.apply(g, soft, t.threshold, false)?
                }
                TopologyMode::Free => self
                    .static_gate(g, store, layer, block, &mut ctx.gates)?
                    .expect("free mode gate"),
                TopologyMode::Adaptive => {
                    let soft = t.soft(g, store, alpha)?;
                    ctx.gates.apply(g, soft, t.threshold, false)?
                }
                TopologyMode::AllOnes => g.constant(Tensor::full(&[1, 1, nf], F::one())),
            },
            _ => g.constant(Tensor::full(&[1, 1, nf], F::one())),
        };
        let weights = g.masked_softmax(alpha, gate, false)?;
        let msg = g.bmm(weights, art.values, false)?;
        let msg = g.merge_heads(msg, heads)?;
        let msg = g.reshape(msg, &[rows, n])?;
        let r = g.add(msg, z)?;
        let f = block.ffn.forward(g, store, r, spec.dropouts.ffn, ctx.training, ctx.rng)?;
        let z_next = g.add(f, r)?;
        Ok((z_next, ReadoutArtifacts { gate, weights }))
    }
}

/// `FC(ReLU(LN(z)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionHead {
    pub norm: LayerNorm,
    pub fc: Linear,
}

impl PredictionHead {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, n: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(store, "head.norm", n, rng),
            fc: Linear::new(store, "head.fc", n, outputs, rng),
        }
    }

    pub fn n_params(n: usize, outputs: usize) -> usize {
        2 * n + Linear::n_params(n, outputs)
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, z: Var) -> Result<Var, AutodiffError> {
        let h = self.norm.forward(g, store, z)?;
        let h = g.relu(h);
        self.fc.forward(g, store, h)
    }
}
