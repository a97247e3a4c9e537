use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

/// Optimizer group a parameter belongs to. Column embeddings train with
/// their own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    ColumnEmbedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    pub data: Vec<F>,
    pub grad: Vec<F>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl<F: Scalar> Parameter<F> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self) -> Tensor<F> {
        Tensor::new(self.shape.clone(), self.data.clone()).expect("parameter shape is consistent")
    }
}

/// Owner of every trainable array of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, ParamId>,
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform(f64),
    Normal(f64),
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let numel: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Zeros => vec![F::zero(); numel],
            Init::Ones => vec![F::one(); numel],
            Init::Constant(c) => vec![F::lit(c); numel],
            Init::Uniform(bound) => (0..numel)
                .map(|_| F::lit(rng.gen_range(-bound..bound)))
                .collect(),
            Init::Normal(std) => (0..numel)
                .map(|_| {
                    // Box-Muller keeps the stream layout independent of rand_distr.
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    F::lit(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
                })
                .collect(),
        };
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            shape: shape.to_vec(),
            group,
            grad: vec![F::zero(); numel],
            data,
            trainable: true,
            decay: true,
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Copies of all parameter values, in registration order.
    pub fn snapshot(&self) -> Vec<Vec<F>> {
        self.params.iter().map(|p| p.data.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<F>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot does not match store");
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.data.copy_from_slice(s);
        }
    }
}
