//! Feature relation graphs: per-sample edge weights, a learned static
//! topology and their assembly into a row-stochastic interaction matrix.
//!
//! Shapes use `B` rows, `N` features, `H` heads, head width `m = n / H` and
//! column-embedding width `d`. Edge weights are `[B·H, N, N]`; static
//! adjacencies are `[H, N, N]` and are shared by every row of a batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Init, ParamGroup, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::nn::Linear;

const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetry {
    #[serde(alias = "s")]
    Symmetric,
    #[serde(alias = "a")]
    Asymmetric,
}

impl Symmetry {
    pub fn letter(self) -> char {
        match self {
            Symmetry::Symmetric => 'S',
            Symmetry::Asymmetric => 'A',
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyMode {
    /// Thresholded cosine similarity of learned column embeddings.
    #[default]
    Knowledge,
    /// Thresholded edge weights; the topology becomes sample dependent.
    Adaptive,
    /// Thresholded free `N × N` score matrix per head.
    Free,
    /// Complete graph.
    AllOnes,
}

impl TopologyMode {
    pub fn name(self) -> &'static str {
        match self {
            TopologyMode::Knowledge => "knowledge",
            TopologyMode::Adaptive => "adaptive",
            TopologyMode::Free => "free",
            TopologyMode::AllOnes => "all_ones",
        }
    }

    /// Whether the hard topology depends only on parameters.
    pub fn is_static(self) -> bool {
        !matches!(self, TopologyMode::Adaptive)
    }
}

/// How hard gates are evaluated.
///
/// `Record` and `Replay` support finite-difference checks of the
/// straight-through path: `Record` behaves like `Hard` but stores
/// `hard − soft` for every gate, and `Replay` then evaluates each gate as
/// `soft + (hard₀ − soft₀)`, a smooth function whose derivative equals the
/// straight-through gradient. Rows with no usable entry at the recorded
/// point stay at their hard values: any perturbation would switch the row
/// on, a jump the straight-through rule (zero gradient there) ignores.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum GateMode {
    #[default]
    Hard,
    Record,
    Replay,
}

/// Replay data of one gate: `gate = soft·mask + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord<F> {
    pub mask: Tensor<F>,
    pub offset: Tensor<F>,
}

#[derive(Clone, Debug, Default)]
pub struct Gates<F> {
    pub mode: GateMode,
    records: Vec<GateRecord<F>>,
    cursor: usize,
}

impl<F: Scalar> Gates<F> {
    pub fn hard() -> Self {
        Self {
            mode: GateMode::Hard,
            records: Vec::new(),
            cursor: 0,
        }
    }

    pub fn recording() -> Self {
        Self {
            mode: GateMode::Record,
            ..Self::hard()
        }
    }

    pub fn replaying(records: Vec<GateRecord<F>>) -> Self {
        Self {
            mode: GateMode::Replay,
            records,
            cursor: 0,
        }
    }

    pub fn into_records(self) -> Vec<GateRecord<F>> {
        self.records
    }

    /// Thresholds `soft`, whose last dimension indexes gated entries.
    /// `exclude_diag` marks square gates whose diagonal is never used.
    pub fn apply(&mut self, g: &mut Graph<F>, soft: Var, threshold: f64, exclude_diag: bool) -> Result<Var, AutodiffError> {
        match self.mode {
            GateMode::Hard => Ok(g.straight_through_gate(soft, threshold)),
            GateMode::Record => {
                let hard = g.straight_through_gate(soft, threshold);
                let shape = g.shape(soft).to_vec();
                let c = shape[shape.len() - 1];
                let r = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
                let (hv, sv) = (g.value(hard).data(), g.value(soft).data());
                let mut mask = vec![F::one(); hv.len()];
                let mut offset: Vec<F> = hv.iter().zip(sv).map(|(&h, &s)| h - s).collect();
                for (row, chunk) in hv.chunks(c).enumerate() {
                    let i = row % r;
                    let live = chunk.iter().enumerate().any(|(j, &h)| h != F::zero() && !(exclude_diag && j == i));
                    if !live {
                        let o = row * c;
                        mask[o..o + c].fill(F::zero());
                        offset[o..o + c].copy_from_slice(chunk);
                    }
                }
                self.records.push(GateRecord {
                    mask: Tensor::new(shape.clone(), mask)?,
                    offset: Tensor::new(shape, offset)?,
                });
                Ok(hard)
            }
            GateMode::Replay => {
                let rec = self.records.get(self.cursor).cloned().ok_or(AutodiffError::InvalidArgument {
                    op: "gate replay",
                    msg: "more gates than recorded".into(),
                })?;
                self.cursor += 1;
                let m = g.constant(rec.mask);
                let o = g.constant(rec.offset);
                let kept = g.mul(soft, m)?;
                g.add(kept, o)
            }
        }
    }
}

/// Bilinear edge scoring `(W_h x_i ⊙ r)ᵀ (W_t x_j) / √m`, per head.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights {
    pub head: Linear,
    /// `None` when head and tail projections share parameters.
    pub tail: Option<Linear>,
    /// Relation vector, `[n]`: head `h` uses entries `h·m..(h+1)·m`.
    /// `None` gives plain scaled dot-product scores.
    pub relation: Option<ParamId>,
    pub heads: usize,
}

impl EdgeWeights {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        n: usize,
        heads: usize,
        symmetry: Symmetry,
        with_relation: bool,
        rng: &mut R,
    ) -> Self {
        let head = Linear::new(store, &format!("{prefix}.w_head"), n, n, rng);
        let tail = match symmetry {
            Symmetry::Symmetric => None,
            Symmetry::Asymmetric => Some(Linear::new(store, &format!("{prefix}.w_tail"), n, n, rng)),
        };
        let relation = with_relation.then(|| {
            let id = store.add(format!("{prefix}.relation"), &[n], ParamGroup::Backbone, Init::Ones, rng);
            store.get_mut(id).decay = false;
            id
        });
        Self {
            head,
            tail,
            relation,
            heads,
        }
    }

    pub fn n_params(n: usize, symmetry: Symmetry, with_relation: bool) -> usize {
        let proj = Linear::n_params(n, n);
        proj * if symmetry == Symmetry::Symmetric { 1 } else { 2 } + if with_relation { n } else { 0 }
    }

    /// Head and tail encodings `f^h`, `f^t` of `[B, N, n]` features; the
    /// same node twice under shared projections.
    pub fn encode<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<(Var, Var), AutodiffError> {
        let fh = self.head.forward(g, store, x)?;
        let ft = match &self.tail {
            Some(t) => t.forward(g, store, x)?,
            None => fh,
        };
        Ok((fh, ft))
    }

    /// Applies the relation vector to `[.., n]` head encodings.
    pub fn relate<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, fh: Var) -> Result<Var, AutodiffError> {
        match self.relation {
            Some(r) => {
                let r = g.param(store, r);
                g.mul_row(fh, r)
            }
            None => Ok(fh),
        }
    }

    /// `[B·H, N, N]` scores from `[B, N, n]` encodings.
    pub fn scores<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        fh: Var,
        ft: Var,
    ) -> Result<Var, AutodiffError> {
        let n = g.shape(fh)[2];
        let m = n / self.heads;
        let fhr = self.relate(g, store, fh)?;
        let hs = g.split_heads(fhr, self.heads)?;
        let ts = g.split_heads(ft, self.heads)?;
        let s = g.bmm(hs, ts, true)?;
        Ok(g.scale(s, F::lit(1.0 / (m as f64).sqrt())))
    }
}

/// Learned hard topology for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub mode: TopologyMode,
    /// `[H, N, d]` head column embeddings (knowledge mode).
    pub e_head: Option<ParamId>,
    /// `[H, N, d]` tail column embeddings; `None` when shared with `e_head`.
    pub e_tail: Option<ParamId>,
    /// `[H, N, N]` free scores (free mode).
    pub free: Option<ParamId>,
    /// `[H]` sigmoid bias, one per head.
    pub bias: Option<ParamId>,
    pub threshold: f64,
    pub heads: usize,
    pub n_features: usize,
    pub symmetry: Symmetry,
}

impl Topology {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        mode: TopologyMode,
        symmetry: Symmetry,
        heads: usize,
        n_features: usize,
        d: usize,
        threshold: f64,
        rng: &mut R,
    ) -> Self {
        let col = ParamGroup::ColumnEmbedding;
        let bound = 1.0 / (d as f64).sqrt();
        let mut add = |store: &mut ParamStore<F>, name: &str, shape: &[usize], group, init| {
            let id = store.add(format!("{prefix}.{name}"), shape, group, init, rng);
            store.get_mut(id).decay = false;
            id
        };
        let (mut e_head, mut e_tail, mut free, mut bias) = (None, None, None, None);
        match mode {
            TopologyMode::Knowledge => {
                e_head = Some(add(store, "e_head", &[heads, n_features, d], col, Init::Uniform(bound)));
                if symmetry == Symmetry::Asymmetric {
                    e_tail = Some(add(store, "e_tail", &[heads, n_features, d], col, Init::Uniform(bound)));
                }
            }
            TopologyMode::Free => {
                free = Some(add(store, "free_topology", &[heads, n_features, n_features], col, Init::Uniform(1.0)));
            }
            TopologyMode::Adaptive | TopologyMode::AllOnes => {}
        }
        if mode != TopologyMode::AllOnes {
            bias = Some(add(store, "topology_bias", &[heads], ParamGroup::Backbone, Init::Zeros));
        }
        Self {
            mode,
            e_head,
            e_tail,
            free,
            bias,
            threshold,
            heads,
            n_features,
            symmetry,
        }
    }

    pub fn n_params(mode: TopologyMode, symmetry: Symmetry, heads: usize, n_features: usize, d: usize) -> usize {
        let emb = heads * n_features * d;
        match mode {
            TopologyMode::Knowledge => emb * if symmetry == Symmetry::Symmetric { 1 } else { 2 } + heads,
            TopologyMode::Free => heads * n_features * n_features + heads,
            TopologyMode::Adaptive => heads,
            TopologyMode::AllOnes => 0,
        }
    }

    /// Parameters that only shape the topology; frozen together with it.
    pub fn topology_params(&self) -> Vec<ParamId> {
        [self.e_head, self.e_tail, self.free, self.bias].into_iter().flatten().collect()
    }

    /// Unit-norm head and tail column embeddings `[H, N, d]` (knowledge
    /// mode only).
    pub fn normalized_embeddings<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
    ) -> Option<(Var, Var)> {
        let eh = g.param(store, self.e_head?);
        let eh = g.l2_normalize(eh, COSINE_EPS);
        let et = match self.e_tail {
            Some(t) => {
                let t = g.param(store, t);
                g.l2_normalize(t, COSINE_EPS)
            }
            None => eh,
        };
        Some((eh, et))
    }

    /// Cosine similarities `[H, N, N]` between head and tail embeddings.
    pub fn topology_scores<F: Scalar>(g: &mut Graph<F>, eh: Var, et: Var) -> Result<Var, AutodiffError> {
        g.bmm(eh, et, true)
    }

    /// `σ(scores + b)` with the per-head bias tiled over leading rows.
    pub fn soft<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, scores: Var) -> Result<Var, AutodiffError> {
        let b = g.param(store, self.bias.expect("gated topology has a bias"));
        let s = g.add_col(scores, b)?;
        Ok(g.sigmoid(s))
    }

    /// Hard adjacency used to mask `edge_scores`: `[H, N, N]` for static
    /// modes, `[B·H, N, N]` in adaptive mode and `[1, N, N]` for the
    /// complete graph.
    pub fn hard_topology<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        edge_scores: Var,
        embeddings: Option<(Var, Var)>,
        exclude_diag: bool,
        gates: &mut Gates<F>,
    ) -> Result<Var, AutodiffError> {
        let n = self.n_features;
        let scores = match self.mode {
            TopologyMode::AllOnes => return Ok(g.constant(Tensor::full(&[1, n, n], F::one()))),
            TopologyMode::Knowledge => {
                let (eh, et) = embeddings.expect("knowledge mode needs embeddings");
                Self::topology_scores(g, eh, et)?
            }
            TopologyMode::Free => {
                let f = g.param(store, self.free.expect("free mode has scores"));
                if self.symmetry == Symmetry::Symmetric {
                    let ft = g.transpose(f)?;
                    let sum = g.add(f, ft)?;
                    g.scale(sum, F::lit(0.5))
                } else {
                    f
                }
            }
            TopologyMode::Adaptive => edge_scores,
        };
        let soft = self.soft(g, store, scores)?;
        gates.apply(g, soft, self.threshold, exclude_diag)
    }
}

/// Masked softmax of edge scores over the permitted entries of `adjacency`.
/// Excluded entries get probability zero and rows without permitted
/// entries are all zero.
pub fn assemble<F: Scalar>(g: &mut Graph<F>, edge_scores: Var, adjacency: Var, self_loops: bool) -> Result<Var, AutodiffError> {
    g.masked_softmax(edge_scores, adjacency, !self_loops)
}

/// `2·⌈log₂ N⌉`, at least 2.
pub fn default_embedding_dim(n_features: usize) -> usize {
    if n_features <= 2 {
        return 2;
    }
    2 * (usize::BITS - (n_features - 1).leading_zeros()) as usize
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_tokens(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn embedding_dim_rule() {
        assert_eq!(default_embedding_dim(8), 6);
        assert_eq!(default_embedding_dim(93), 14);
        assert_eq!(default_embedding_dim(2), 2);
        assert_eq!(default_embedding_dim(5), 6);
        assert_eq!(default_embedding_dim(9), 8);
    }

    #[test]
    fn shared_projections_give_symmetric_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let ew = EdgeWeights::new(&mut store, "l", 8, 2, Symmetry::Symmetric, true, &mut rng);
        for v in store.get_mut(ew.relation.unwrap()).data.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mut g = Graph::new();
        let x = g.constant(random_tokens(&mut rng, &[3, 5, 8]));
        let (fh, ft) = ew.encode(&mut g, &store, x).unwrap();
        let s = ew.scores(&mut g, &store, fh, ft).unwrap();
        let v = g.value(s).data();
        for t in 0..6 {
            for i in 0..5 {
                for j in 0..5 {
                    assert!((v[t * 25 + i * 5 + j] - v[t * 25 + j * 5 + i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_relation_matches_scaled_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let ew = EdgeWeights::new(&mut store, "l", 4, 1, Symmetry::Asymmetric, true, &mut rng);
        let tokens = random_tokens(&mut rng, &[1, 3, 4]);
        let mut g = Graph::new();
        let x = g.constant(tokens);
        let (fh, ft) = ew.encode(&mut g, &store, x).unwrap();
        let s = ew.scores(&mut g, &store, fh, ft).unwrap();
        let (q, k) = (g.value(fh).data().to_vec(), g.value(ft).data().to_vec());
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..4).map(|c| q[i * 4 + c] * k[j * 4 + c]).sum();
                assert!((g.value(s).data()[i * 3 + j] - dot / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_projection_hand_value() {
        let m = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let ew = EdgeWeights::new(&mut store, "l", m, 1, Symmetry::Symmetric, true, &mut rng);
        let w = &mut store.get_mut(ew.head.weight).data;
        w.iter_mut().enumerate().for_each(|(k, v)| *v = if k % (m + 1) == 0 { 1.0 } else { 0.0 });
        store.get_mut(ew.head.bias).data.iter_mut().for_each(|v| *v = 0.0);
        let root = (m as f64).sqrt();
        let x = Tensor::new(vec![1, 2, m], vec![root, 0.0, 0.0, 0.0, root, 0.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(x);
        let (fh, ft) = ew.encode(&mut g, &store, x).unwrap();
        let s = ew.scores(&mut g, &store, fh, ft).unwrap();
        assert!((g.value(s).data()[1] - root).abs() < 1e-12);
    }

    #[test]
    fn assemble_hand_softmax() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::new(vec![1, 3, 3], vec![5.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let mut a = vec![1.0; 9];
        a[3..6].iter_mut().for_each(|v| *v = 0.0);
        let a = g.constant(Tensor::new(vec![1, 3, 3], a).unwrap());
        let out = assemble(&mut g, s, a, false).unwrap();
        let v = g.value(out).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((v[2] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(&v[3..6], &[0.0, 0.0, 0.0]);
        assert!((v[6..9].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v[8], 0.0);
    }

    #[test]
    fn cosine_scores_identical_and_orthogonal() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Topology::new(&mut store, "l", TopologyMode::Knowledge, Symmetry::Asymmetric, 1, 2, 2, 0.5, &mut rng);
        store.get_mut(t.e_head.unwrap()).data = vec![3.0, 0.0, 0.0, 2.0];
        store.get_mut(t.e_tail.unwrap()).data = vec![1.0, 0.0, 5.0, 0.0];
        let mut g = Graph::new();
        let (eh, et) = t.normalized_embeddings(&mut g, &store).unwrap();
        let s = Topology::topology_scores(&mut g, eh, et).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12 && v[3].abs() < 1e-12);
    }

    #[test]
    fn zero_embedding_is_finite() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Topology::new(&mut store, "l", TopologyMode::Knowledge, Symmetry::Symmetric, 1, 2, 2, 0.5, &mut rng);
        store.get_mut(t.e_head.unwrap()).data = vec![0.0; 4];
        let mut g = Graph::new();
        let (eh, et) = t.normalized_embeddings(&mut g, &store).unwrap();
        let s = Topology::topology_scores(&mut g, eh, et).unwrap();
        assert!(g.value(s).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn random_init_density_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut on, mut total) = (0usize, 0usize);
        for _ in 0..200 {
            let mut store = ParamStore::<f64>::new();
            let t = Topology::new(&mut store, "l", TopologyMode::Knowledge, Symmetry::Asymmetric, 4, 8, 6, 0.5, &mut rng);
            let mut g = Graph::new();
            let emb = t.normalized_embeddings(&mut g, &store);
            let dummy = g.constant(Tensor::zeros(&[1]));
            let a = t.hard_topology(&mut g, &store, dummy, emb, true, &mut Gates::hard()).unwrap();
            on += g.value(a).data().iter().filter(|&&v| v == 1.0).count();
            total += g.value(a).numel();
        }
        let density = on as f64 / total as f64;
        assert!((density - 0.5).abs() < 0.02, "density {density}");
    }

    #[test]
    fn gate_threshold_is_strict() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = Topology::new(&mut store, "l", TopologyMode::Free, Symmetry::Asymmetric, 1, 2, 2, 0.5, &mut rng);
        // sigmoid(0) = 0.5 exactly, sigmoid(2.2) ≈ 0.9
        store.get_mut(t.free.unwrap()).data = vec![0.0, 2.2, -2.2, 0.0];
        let mut g = Graph::new();
        let dummy = g.constant(Tensor::zeros(&[1]));
        let a = t.hard_topology(&mut g, &store, dummy, None, true, &mut Gates::hard()).unwrap();
        assert_eq!(g.value(a).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn replayed_gates_reproduce_recorded_forward() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Topology::new(&mut store, "l", TopologyMode::Knowledge, Symmetry::Asymmetric, 2, 4, 4, 0.5, &mut rng);
        let run = |gates: &mut Gates<f64>| {
            let mut g = Graph::new();
            let emb = t.normalized_embeddings(&mut g, &store);
            let dummy = g.constant(Tensor::zeros(&[1]));
            let a = t.hard_topology(&mut g, &store, dummy, emb, true, gates).unwrap();
            g.value(a).data().to_vec()
        };
        let mut rec = Gates::recording();
        let hard = run(&mut rec);
        let replay = run(&mut Gates::replaying(rec.into_records()));
        for (h, r) in hard.iter().zip(&replay) {
            assert!((h - r).abs() < 1e-15);
        }
    }
}
