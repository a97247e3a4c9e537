//! Full model: tokenizer, stacked blocks, readout chain and prediction head.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamStore, Precision, Scalar, Tensor, Var};
use crate::block::{BlockSpec, Dropouts, ForwardCtx, LayerArtifacts, T2GBlock};
use crate::data::{Batch, FeatureSchema, PreprocessState};
use crate::graph_estimator::{default_embedding_dim, Gates, Symmetry, TopologyMode};
use crate::readout::{PredictionHead, Readout, ReadoutArtifacts};
use crate::tokenizer::FeatureTokenizer;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema fingerprint mismatch: checkpoint has {expected}, dataset has {found}")]
    FingerprintMismatch { expected: String, found: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Token width `n`.
    pub d_token: usize,
    pub heads: usize,
    pub weight_symmetry: Symmetry,
    pub topology_symmetry: Symmetry,
    pub self_loops: bool,
    pub topology_mode: TopologyMode,
    /// Which layers use the graph estimator; `None` means all of them.
    pub per_layer_ge: Option<Vec<bool>>,
    pub attention_dropout: f64,
    pub ffn_dropout: f64,
    pub residual_dropout: f64,
    /// Column-embedding width; `None` means `2·⌈log₂ N⌉`.
    pub d_embedding: Option<usize>,
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = Dropouts::default();
        Self {
            n_layers: 3,
            d_token: 192,
            heads: 8,
            weight_symmetry: Symmetry::Symmetric,
            topology_symmetry: Symmetry::Asymmetric,
            self_loops: false,
            topology_mode: TopologyMode::Knowledge,
            per_layer_ge: None,
            attention_dropout: d.attention,
            ffn_dropout: d.ffn,
            residual_dropout: d.residual,
            d_embedding: None,
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    /// Relation-graph variant name such as `SwAt`.
    pub fn variant(&self) -> String {
        format!("{}w{}t", self.weight_symmetry.letter(), self.topology_symmetry.letter())
    }

    /// Sets both symmetry flags from a name like `SwAt` or `AwSt`.
    pub fn set_variant(&mut self, name: &str) -> Result<(), ModelError> {
        let sym = |c: char| match c.to_ascii_uppercase() {
            'S' => Some(Symmetry::Symmetric),
            'A' => Some(Symmetry::Asymmetric),
            _ => None,
        };
        let c: Vec<char> = name.chars().collect();
        match c.as_slice() {
            [w, 'w', t, 't'] => match (sym(*w), sym(*t)) {
                (Some(w), Some(t)) => {
                    self.weight_symmetry = w;
                    self.topology_symmetry = t;
                    Ok(())
                }
                _ => Err(ModelError::Config(format!("unknown graph variant `{name}`"))),
            },
            _ => Err(ModelError::Config(format!("unknown graph variant `{name}`"))),
        }
    }

    pub fn dropouts(&self) -> Dropouts {
        Dropouts {
            attention: self.attention_dropout,
            ffn: self.ffn_dropout,
            residual: self.residual_dropout,
        }
    }

    pub fn embedding_dim(&self, n_features: usize) -> usize {
        self.d_embedding.unwrap_or_else(|| default_embedding_dim(n_features))
    }

    pub fn layer_has_ge(&self, layer: usize) -> bool {
        self.per_layer_ge.as_ref().is_none_or(|v| v[layer])
    }

    pub fn validate(&self, n_features: usize) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 {
            return err("n_layers must be positive".into());
        }
        if self.heads == 0 || self.d_token == 0 || !self.d_token.is_multiple_of(self.heads) {
            return err(format!(
                "d_token ({}) must be a positive multiple of heads ({})",
                self.d_token, self.heads
            ));
        }
        if let Some(v) = &self.per_layer_ge {
            if v.len() != self.n_layers {
                return err(format!("per_layer_ge has {} entries for {} layers", v.len(), self.n_layers));
            }
        }
        for (name, p) in [
            ("attention_dropout", self.attention_dropout),
            ("ffn_dropout", self.ffn_dropout),
            ("residual_dropout", self.residual_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return err(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return err(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.d_embedding == Some(0) {
            return err("d_embedding must be positive".into());
        }
        if n_features == 0 {
            return err("the schema has no features".into());
        }
        Ok(())
    }

    pub fn block_specs(&self, n_features: usize) -> Vec<BlockSpec> {
        (0..self.n_layers)
            .map(|l| BlockSpec {
                d_token: self.d_token,
                heads: self.heads,
                n_features,
                d_embedding: self.embedding_dim(n_features),
                graph_estimator: self.layer_has_ge(l),
                weight_symmetry: self.weight_symmetry,
                topology_symmetry: self.topology_symmetry,
                topology_mode: self.topology_mode,
                self_loops: self.self_loops,
                threshold: self.threshold,
                dropouts: self.dropouts(),
            })
            .collect()
    }
}

/// Number of scalar parameters of a model, in closed form.
pub fn parameter_count(schema: &FeatureSchema, config: &ModelConfig) -> usize {
    let specs = config.block_specs(schema.n_features());
    FeatureTokenizer::n_params(schema.n_numerical(), &schema.cat_cardinalities(), config.d_token)
        + specs.iter().map(T2GBlock::n_params).sum::<usize>()
        + Readout::n_params(&specs)
        + PredictionHead::n_params(config.d_token, schema.n_outputs())
}

/// Cached hard topologies, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTopology<F> {
    pub adjacency: Vec<Option<Tensor<F>>>,
    pub readout_gates: Vec<Option<Tensor<F>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<F> {
    pub params: Vec<Vec<F>>,
    pub trainable: Vec<bool>,
    pub frozen: Option<FrozenTopology<F>>,
}

pub struct ForwardOutput {
    /// `[B, outputs]`.
    pub output: Var,
    pub layers: Vec<LayerArtifacts>,
    pub readout: Vec<ReadoutArtifacts>,
}

pub struct T2GFormer<F> {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub store: ParamStore<F>,
    pub seed: u64,
    pub tokenizer: FeatureTokenizer,
    pub blocks: Vec<T2GBlock>,
    pub readout: Readout,
    pub head: PredictionHead,
    frozen: Option<FrozenTopology<F>>,
}

impl<F: Scalar> T2GFormer<F> {
    /// Builds and initializes a model. Initialization draws from stream 0
    /// of a ChaCha8 generator seeded with `seed`.
    pub fn new(schema: &FeatureSchema, config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let nf = schema.n_features();
        config.validate(nf)?;
        if schema.n_outputs() == 0 {
            return Err(ModelError::Config("classification schema without classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tokenizer = FeatureTokenizer::new(
            &mut store,
            schema.n_numerical(),
            &schema.cat_cardinalities(),
            config.d_token,
            &mut rng,
        );
        let blocks: Vec<T2GBlock> = config
            .block_specs(nf)
            .into_iter()
            .enumerate()
            .map(|(l, spec)| T2GBlock::new(&mut store, &format!("layer{l}"), spec, &mut rng))
            .collect();
        let readout = Readout::new(&mut store, &blocks, &mut rng);
        let head = PredictionHead::new(&mut store, config.d_token, schema.n_outputs(), &mut rng);
        Ok(Self {
            config,
            schema: schema.clone(),
            store,
            seed,
            tokenizer,
            blocks,
            readout,
            head,
            frozen: None,
        })
    }

    pub fn n_features(&self) -> usize {
        self.schema.n_features()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim(self.n_features())
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn frozen(&self) -> Option<&FrozenTopology<F>> {
        self.frozen.as_ref()
    }

    pub fn forward(
        &self,
        g: &mut Graph<F>,
        batch: &Batch<F>,
        ctx: &mut ForwardCtx<'_, F>,
    ) -> Result<ForwardOutput, AutodiffError> {
        let store = &self.store;
        let mut x = self.tokenizer.tokenize(g, store, batch)?;
        let mut z = self.readout.initial(g, store, batch.rows)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        let mut readout = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let cached_a = self.frozen.as_ref().and_then(|f| f.adjacency[l].as_ref());
            let cached_gate = self.frozen.as_ref().and_then(|f| f.readout_gates[l].as_ref());
            let (next, art) = block.forward(g, store, x, ctx, cached_a)?;
            let (z_next, r) = self.readout.collect(g, store, z, l, block, &art, ctx, cached_gate)?;
            x = next;
            z = z_next;
            layers.push(art);
            readout.push(r);
        }
        let output = self.head.forward(g, store, z)?;
        Ok(ForwardOutput {
            output,
            layers,
            readout,
        })
    }

    /// Evaluation-mode outputs `[B, outputs]`.
    pub fn predict(&self, batch: &Batch<F>) -> Result<Tensor<F>, AutodiffError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, &mut ForwardCtx::eval(&mut rng))?;
        Ok(g.value(out.output).clone())
    }

    /// Static hard adjacency and readout gate of every layer (`None` where
    /// they depend on the sample or are complete).
    pub fn static_topology(&self) -> Result<FrozenTopology<F>, AutodiffError> {
        if let Some(f) = &self.frozen {
            return Ok(f.clone());
        }
        let mut g = Graph::new();
        let mut adjacency = Vec::new();
        let mut readout_gates = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            let a = block.static_adjacency(&mut g, &self.store)?;
            adjacency.push(a.map(|v| g.value(v).clone()));
            let gate = self.readout.static_gate(&mut g, &self.store, l, block, &mut Gates::hard())?;
            readout_gates.push(gate.map(|v| g.value(v).clone()));
        }
        Ok(FrozenTopology {
            adjacency,
            readout_gates,
        })
    }

    /// Caches the current hard topologies and stops training the
    /// parameters that only shape them. Idempotent.
    pub fn freeze_topology(&mut self) -> Result<(), AutodiffError> {
        if self.frozen.is_some() {
            return Ok(());
        }
        let cache = self.static_topology()?;
        for (l, block) in self.blocks.iter().enumerate() {
            for id in block.topology_params().into_iter().chain(self.readout.topology_params(l)) {
                self.store.get_mut(id).trainable = false;
            }
        }
        self.frozen = Some(cache);
        Ok(())
    }

    /// In-memory copy of everything training mutates.
    pub fn state(&self) -> ModelState<F> {
        ModelState {
            params: self.store.snapshot(),
            trainable: self.store.iter().map(|(_, p)| p.trainable).collect(),
            frozen: self.frozen.clone(),
        }
    }

    pub fn restore_state(&mut self, state: &ModelState<F>) {
        self.store.restore(&state.params);
        for (p, &t) in self.store.iter_mut().zip(&state.trainable) {
            p.trainable = t;
        }
        self.frozen = state.frozen.clone();
    }

    pub fn to_checkpoint(&self, preprocessing: Option<&PreprocessState>) -> Checkpoint {
        let params = self
            .store
            .iter()
            .map(|(_, p)| StoredParam {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                trainable: p.trainable,
                data: p.data.iter().map(|v| v.to_f64().unwrap()).collect(),
            })
            .collect();
        let stored = |t: &Option<Tensor<F>>| {
            t.as_ref().map(|t| StoredTensor {
                shape: t.shape().to_vec(),
                data: t.to_f64(),
            })
        };
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            precision: F::PRECISION,
            config: self.config.clone(),
            fingerprint: self.schema.fingerprint(),
            schema: self.schema.clone(),
            preprocessing: preprocessing.cloned(),
            seed: self.seed,
            params,
            frozen: self.frozen.as_ref().map(|f| StoredFrozen {
                adjacency: f.adjacency.iter().map(stored).collect(),
                readout_gates: f.readout_gates.iter().map(stored).collect(),
            }),
            epoch: None,
            rng: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let bad = |message: String| ModelError::Checkpoint {
            path: PathBuf::new(),
            message,
        };
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {}", ck.format_version)));
        }
        if ck.schema.fingerprint() != ck.fingerprint {
            return Err(bad("schema does not match its recorded fingerprint".into()));
        }
        let mut model = Self::new(&ck.schema, ck.config.clone(), ck.seed)?;
        if ck.params.len() != model.store.len() {
            return Err(bad(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                ck.params.len()
            )));
        }
        for sp in &ck.params {
            let id = model
                .store
                .id(&sp.name)
                .ok_or_else(|| bad(format!("unknown parameter `{}`", sp.name)))?;
            let p = model.store.get_mut(id);
            if p.shape() != sp.shape.as_slice() || sp.data.len() != p.numel() {
                return Err(bad(format!("parameter `{}` has the wrong shape", sp.name)));
            }
            p.data = sp.data.iter().map(|&v| F::lit(v)).collect();
            p.trainable = sp.trainable;
        }
        if let Some(f) = &ck.frozen {
            let load = |v: &[Option<StoredTensor>]| -> Result<Vec<Option<Tensor<F>>>, ModelError> {
                if v.len() != model.blocks.len() {
                    return Err(bad("frozen topology has the wrong layer count".into()));
                }
                v.iter()
                    .map(|t| {
                        t.as_ref()
                            .map(|t| Tensor::from_f64(&t.shape, &t.data).map_err(ModelError::from))
                            .transpose()
                    })
                    .collect()
            };
            model.frozen = Some(FrozenTopology {
                adjacency: load(&f.adjacency)?,
                readout_gates: load(&f.readout_gates)?,
            });
        }
        Ok(model)
    }

    /// Refuses data whose schema differs from the one the model was built
    /// for.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<(), ModelError> {
        let (expected, found) = (self.schema.fingerprint(), schema.fingerprint());
        if expected != found {
            return Err(ModelError::FingerprintMismatch { expected, found });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredFrozen {
    pub adjacency: Vec<Option<StoredTensor>>,
    pub readout_gates: Vec<Option<StoredTensor>>,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        let seed: [u8; 32] = hex::decode(&self.seed).ok()?.try_into().ok()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

/// Self-contained model file: configuration, schema, preprocessing, all
/// parameter values (as `f64`) and the topology cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub precision: Precision,
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub fingerprint: String,
    pub preprocessing: Option<PreprocessState>,
    pub seed: u64,
    pub params: Vec<StoredParam>,
    pub frozen: Option<StoredFrozen>,
    /// Epoch at which the parameters were captured.
    pub epoch: Option<usize>,
    /// Dropout stream position at capture time.
    pub rng: Option<RngState>,
}

impl Checkpoint {
    /// Writes through a temporary file so a failed write never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
