//! Feature tokenizer: one width-`n` token per column.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Init, ParamGroup, ParamId, ParamStore, Scalar, Var};
use crate::data::Batch;

/// Numerical feature `i` with value `v` becomes `v·W[i] + B[i]`; categorical
/// feature `k` with index `c` becomes row `c` of its own table. Tables have
/// one extra row for categories not seen during training.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTokenizer {
    num_weight: Option<ParamId>,
    num_bias: Option<ParamId>,
    cat_tables: Vec<ParamId>,
    n_numerical: usize,
    cardinalities: Vec<usize>,
    d_token: usize,
}

impl FeatureTokenizer {
    /// `cardinalities` are full table sizes (vocabulary plus unknown row).
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        n_numerical: usize,
        cardinalities: &[usize],
        d_token: usize,
        rng: &mut R,
    ) -> Self {
        let init = Init::Uniform(1.0 / (d_token as f64).sqrt());
        let mut add = |store: &mut ParamStore<F>, name: String, rows: usize| {
            let id = store.add(name, &[rows, d_token], ParamGroup::Backbone, init, rng);
            store.get_mut(id).decay = false;
            id
        };
        let (num_weight, num_bias) = if n_numerical > 0 {
            (
                Some(add(store, "tokenizer.num_weight".into(), n_numerical)),
                Some(add(store, "tokenizer.num_bias".into(), n_numerical)),
            )
        } else {
            (None, None)
        };
        let cat_tables = cardinalities
            .iter()
            .enumerate()
            .map(|(k, &c)| add(store, format!("tokenizer.cat{k}"), c))
            .collect();
        Self {
            num_weight,
            num_bias,
            cat_tables,
            n_numerical,
            cardinalities: cardinalities.to_vec(),
            d_token,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_numerical + self.cat_tables.len()
    }

    pub fn n_params(n_numerical: usize, cardinalities: &[usize], d_token: usize) -> usize {
        (2 * n_numerical + cardinalities.iter().sum::<usize>()) * d_token
    }

    /// `[rows, N, n]` tokens, numerical features first.
    pub fn tokenize<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        batch: &Batch<F>,
    ) -> Result<Var, AutodiffError> {
        let rows = batch.rows;
        let mut parts = Vec::with_capacity(1 + self.cat_tables.len());
        if let (Some(w), Some(b)) = (self.num_weight, self.num_bias) {
            let w = g.param(store, w);
            let b = g.param(store, b);
            parts.push(g.numeric_tokens(&batch.numerical, w, b)?);
        }
        let nc = self.cat_tables.len();
        if batch.categorical.len() != rows * nc {
            return Err(AutodiffError::InvalidArgument {
                op: "tokenize",
                msg: format!("expected {} categorical values, got {}", rows * nc, batch.categorical.len()),
            });
        }
        for (k, &table) in self.cat_tables.iter().enumerate() {
            let idx: Vec<usize> = (0..rows).map(|r| batch.categorical[r * nc + k]).collect();
            let t = g.param(store, table);
            let tok = g.embedding_gather(t, &idx)?;
            parts.push(g.reshape(tok, &[rows, 1, self.d_token])?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        g.concat(&parts, 1)
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tensor;

    fn setup() -> (ParamStore<f64>, FeatureTokenizer) {
        let mut store = ParamStore::new();
        let tok = FeatureTokenizer::new(&mut store, 2, &[3, 4], 8, &mut ChaCha8Rng::seed_from_u64(0));
        (store, tok)
    }

    fn run(store: &ParamStore<f64>, tok: &FeatureTokenizer, num: &[f64], cat: &[usize]) -> Result<Tensor<f64>, AutodiffError> {
        let rows = num.len() / 2;
        let batch = Batch {
            rows,
            numerical: Tensor::new(vec![rows, 2], num.to_vec()).unwrap(),
            categorical: cat.to_vec(),
        };
        let mut g = Graph::new();
        let v = tok.tokenize(&mut g, store, &batch)?;
        Ok(g.value(v).clone())
    }

    #[test]
    fn zero_value_gives_bias_and_differences_give_weight() {
        let (store, tok) = setup();
        let out = run(&store, &tok, &[0.0, 1.0, 0.0, 2.0], &[0, 0, 0, 0]).unwrap();
        assert_eq!(out.shape(), &[2, 4, 8]);
        let bias = &store.get(store.id("tokenizer.num_bias").unwrap()).data;
        let weight = &store.get(store.id("tokenizer.num_weight").unwrap()).data;
        assert_eq!(&out.data()[..8], &bias[..8]);
        let d = out.data();
        for j in 0..8 {
            let diff = d[32 + 8 + j] - d[8 + j];
            assert!((diff - weight[8 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn categorical_tokens_are_table_rows() {
        let (store, tok) = setup();
        let out = run(&store, &tok, &[0.5, 0.5], &[2, 3]).unwrap();
        let t0 = &store.get(store.id("tokenizer.cat0").unwrap()).data;
        let t1 = &store.get(store.id("tokenizer.cat1").unwrap()).data;
        assert_eq!(&out.data()[16..24], &t0[16..24]);
        assert_eq!(&out.data()[24..32], &t1[24..32]);
    }

    #[test]
    fn out_of_range_category_errors() {
        let (store, tok) = setup();
        let err = run(&store, &tok, &[0.0, 0.0], &[3, 0]).unwrap_err();
        assert_eq!(err, AutodiffError::IndexOutOfRange { index: 3, rows: 3 });
    }

    #[test]
    fn gradient_reaches_one_row_per_table() {
        let (mut store, tok) = setup();
        let batch = Batch {
            rows: 1,
            numerical: Tensor::new(vec![1, 2], vec![0.3, -1.0]).unwrap(),
            categorical: vec![1, 2],
        };
        let mut g = Graph::new();
        let v = tok.tokenize(&mut g, &store, &batch).unwrap();
        let loss = g.sum(v);
        g.backward(loss, &mut store).unwrap();
        let grad = &store.get(store.id("tokenizer.cat1").unwrap()).grad;
        let touched: Vec<usize> = (0..4).filter(|&r| grad[r * 8..(r + 1) * 8].iter().any(|&x| x != 0.0)).collect();
        assert_eq!(touched, vec![2]);
        let gw = &store.get(store.id("tokenizer.num_weight").unwrap()).grad;
        assert!((gw[0] - 0.3).abs() < 1e-12 && (gw[8] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn california_layout_gives_eight_tokens() {
        let mut store = ParamStore::<f32>::new();
        let tok = FeatureTokenizer::new(&mut store, 8, &[], 16, &mut ChaCha8Rng::seed_from_u64(1));
        let batch = Batch {
            rows: 3,
            numerical: Tensor::zeros(&[3, 8]),
            categorical: vec![],
        };
        let mut g = Graph::new();
        let v = tok.tokenize(&mut g, &store, &batch).unwrap();
        assert_eq!(g.shape(v), &[3, 8, 16]);
        assert_eq!(store.numel(), FeatureTokenizer::n_params(8, &[], 16));
    }
}
