//! Small parameterized building blocks shared by the model components.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Init, ParamGroup, ParamId, ParamStore, Scalar, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x·W + b` over the last axis. `W` is `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights and biases uniform in `±1/√fan_in`; only the weight matrix
    /// is subject to weight decay.
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            &[fan_in, fan_out],
            ParamGroup::Backbone,
            Init::Uniform(bound),
            rng,
        );
        let bias = store.add(format!("{name}.bias"), &[fan_out], ParamGroup::Backbone, Init::Uniform(bound), rng);
        store.get_mut(bias).decay = false;
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var, AutodiffError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn n_params(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, name: &str, width: usize, rng: &mut R) -> Self {
        let gamma = store.add(format!("{name}.gamma"), &[width], ParamGroup::Backbone, Init::Ones, rng);
        let beta = store.add(format!("{name}.beta"), &[width], ParamGroup::Backbone, Init::Zeros, rng);
        store.get_mut(gamma).decay = false;
        store.get_mut(beta).decay = false;
        Self { gamma, beta }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var, AutodiffError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Gated feed-forward network `W2·(relu(x·Wg) ⊙ (x·Wa))` with dropout on
/// the hidden activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ReGlu {
    pub value: Linear,
    pub gate: Linear,
    pub out: Linear,
}

impl ReGlu {
    /// Hidden width `⌈4n/3⌉`.
    pub fn hidden_width(n: usize) -> usize {
        (4 * n).div_ceil(3)
    }

    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, name: &str, n: usize, rng: &mut R) -> Self {
        let h = Self::hidden_width(n);
        Self {
            value: Linear::new(store, &format!("{name}.value"), n, h, rng),
            gate: Linear::new(store, &format!("{name}.gate"), n, h, rng),
            out: Linear::new(store, &format!("{name}.out"), h, n, rng),
        }
    }

    pub fn forward<F: Scalar, R: Rng>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, AutodiffError> {
        let a = self.value.forward(g, store, x)?;
        let gate = self.gate.forward(g, store, x)?;
        let gate = g.relu(gate);
        let hidden = g.mul(a, gate)?;
        let hidden = g.dropout(hidden, dropout, training, rng);
        self.out.forward(g, store, hidden)
    }

    pub fn n_params(n: usize) -> usize {
        let h = Self::hidden_width(n);
        2 * Linear::n_params(n, h) + Linear::n_params(h, n)
    }
}
