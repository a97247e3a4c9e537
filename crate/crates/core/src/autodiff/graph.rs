use rand::Rng;

use super::{AutodiffError, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Additive mask value used for excluded softmax entries.
pub const MASK_NEG: f64 = -1e9;

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    MatMul,
    Bmm,
    Transpose,
    Add,
    AddRow,
    AddCol,
    Mul,
    MulRow,
    Scale,
    Sigmoid,
    Relu,
    Gelu,
    RowSoftmax,
    MaskedSoftmax,
    LayerNorm,
    L2Normalize,
    Dropout,
    Gather,
    NumericTokens,
    Concat,
    Sum,
    Mean,
    SplitHeads,
    MergeHeads,
    Reshape,
    StraightThrough,
    CrossEntropy,
    Mse,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    AddCol { a: Var, col: Var },
    Mul { a: Var, b: Var },
    MulRow { a: Var, row: Var },
    Scale { a: Var, c: F },
    Sigmoid { a: Var },
    Relu { a: Var },
    Gelu { a: Var },
    RowSoftmax { a: Var },
    MaskedSoftmax { scores: Var, weights: Var, exclude_diag: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<F> },
    L2Normalize { a: Var, norms: Vec<F> },
    Dropout { a: Var, mask: Vec<F> },
    Gather { table: Var, indices: Vec<usize> },
    NumericTokens { values: Vec<F>, weight: Var, bias: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum { a: Var },
    Mean { a: Var },
    SplitHeads { a: Var, heads: usize },
    MergeHeads { a: Var, heads: usize },
    Reshape { a: Var },
    StraightThrough { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Mse { pred: Var, targets: Vec<F> },
}

impl<F> Op<F> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Bmm { .. } => OpKind::Bmm,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add { .. } => OpKind::Add,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::AddCol { .. } => OpKind::AddCol,
            Op::Mul { .. } => OpKind::Mul,
            Op::MulRow { .. } => OpKind::MulRow,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Relu { .. } => OpKind::Relu,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::RowSoftmax { .. } => OpKind::RowSoftmax,
            Op::MaskedSoftmax { .. } => OpKind::MaskedSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Gather { .. } => OpKind::Gather,
            Op::NumericTokens { .. } => OpKind::NumericTokens,
            Op::Concat { .. } => OpKind::Concat,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::StraightThrough { .. } => OpKind::StraightThrough,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mse { .. } => OpKind::Mse,
        }
    }
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) param: Option<ParamId>,
}

/// A single-use tape. Build one per forward pass, call
/// [`Graph::backward`] once (or more, to accumulate), then drop it.
pub struct Graph<F> {
    pub(crate) nodes: Vec<Node<F>>,
    pub(crate) fault: Option<OpKind>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument { op, msg: msg.into() }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(0.044715);
    F::lit(0.5) * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Makes the backward rule of `kind` double the gradient it sends to
    /// its inputs. Only meant for exercising gradient-check harnesses.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding a copy of a stored parameter. Gradients reaching it are
    /// accumulated into the store by [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let v = self.push(store.get(id).tensor(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// `a[..., k] · b[k, p] -> [..., p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let k = sb[0];
        let p = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![F::zero(); m * p];
        F::gemm_raw(
            m,
            k,
            p,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (p as isize, 1),
            &mut out,
            F::zero(),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = p;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }))
    }

    /// Batched product `a[t] · b[t]` (or `a[t] · b[t]ᵀ` with `trans_b`)
    /// over rank-3 operands with equal leading dimension.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let b_strides = if trans_b {
            (1, k as isize)
        } else {
            (p as isize, 1)
        };
        let mut out = vec![F::zero(); bt * m * p];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for t in 0..bt {
                F::gemm_raw(
                    m,
                    k,
                    p,
                    &av[t * m * k..(t + 1) * m * k],
                    (k as isize, 1),
                    &bv[t * k * p..(t + 1) * k * p],
                    b_strides,
                    &mut out[t * m * p..(t + 1) * m * p],
                    F::zero(),
                );
            }
        }
        Ok(self.push(Tensor::new(vec![bt, m, p], out)?, Op::Bmm { a, b, trans_b }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(invalid("transpose", format!("needs rank >= 2, got {sa:?}")));
        }
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch = self.value(a).numel() / (r * c).max(1);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for t in 0..batch {
            let base = t * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let mut shape = sa;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose { a }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }))
    }

    /// Adds a row vector to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let c = self.value(a).last_dim();
        if self.shape(row).len() != 1 || self.shape(row)[0] != c {
            return Err(mismatch("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let out: Vec<F> = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow { a, row }))
    }

    /// Views `a` as a matrix with `shape[0]` rows and adds a column vector.
    /// A column shorter than the row count is tiled: row `i` receives
    /// `col[i % len]`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let sc = self.shape(col).to_vec();
        if sa.is_empty() || sc.len() != 1 || sc[0] == 0 || !sa[0].is_multiple_of(sc[0]) {
            return Err(mismatch("add_col", &sa, &sc));
        }
        let rows = sa[0];
        let cols = self.value(a).numel() / rows.max(1);
        let len = sc[0];
        let cv = self.value(col).data().to_vec();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for i in 0..rows {
            let add = cv[i % len];
            out.extend(src[i * cols..(i + 1) * cols].iter().map(|&x| x + add));
        }
        Ok(self.push(Tensor::new(sa, out)?, Op::AddCol { a, col }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }))
    }

    /// Multiplies every row (last axis) of `a` elementwise by `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let c = self.value(a).last_dim();
        if self.shape(row).len() != 1 || self.shape(row)[0] != c {
            return Err(mismatch("mul_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let out: Vec<F> = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(&x, &y)| x * y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::MulRow { a, row }))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Scale { a, c })
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out: Vec<F> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out).unwrap(), op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(F::zero()), Op::Relu { a })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu { a })
    }

    /// Softmax over the last axis. `mask`, when given, is added to the input
    /// before normalization and must have the same shape; use 0 for kept
    /// entries and [`MASK_NEG`] for excluded ones.
    pub fn row_softmax(&mut self, a: Var, mask: Option<&Tensor<F>>) -> Result<Var, AutodiffError> {
        if let Some(m) = mask {
            if m.shape() != self.shape(a) {
                return Err(mismatch("row_softmax", self.shape(a), m.shape()));
            }
        }
        let c = self.value(a).last_dim();
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for (r, (row, dst)) in src.chunks(c).zip(out.chunks_mut(c)).enumerate() {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = row[j] + mask.map_or(F::zero(), |m| m.data()[r * c + j]);
            }
            let max = dst.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for d in dst.iter_mut() {
                *d = (*d - max).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d = *d / z;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::RowSoftmax { a }))
    }

    /// Softmax over the last axis restricted to the support of `weights`.
    ///
    /// `scores` is `[bt, r, c]`; `weights` is `[bw, r, c]` with `bt % bw == 0`,
    /// batch `t` of `scores` using batch `t % bw` of `weights`. For binary
    /// weights the result equals the additive-mask softmax (excluded entries
    /// get [`MASK_NEG`]): entries with weight 0 get probability exactly 0.
    /// Rows without any permitted entry are all zero. With `exclude_diag`
    /// the diagonal is never permitted.
    ///
    /// For non-binary weights the entry is `w·exp(s) / Σ w·exp(s)`, which
    /// defines the gradient passed to `weights`.
    pub fn masked_softmax(
        &mut self,
        scores: Var,
        weights: Var,
        exclude_diag: bool,
    ) -> Result<Var, AutodiffError> {
        let (ss, sw) = (self.shape(scores).to_vec(), self.shape(weights).to_vec());
        if ss.len() != 3
            || sw.len() != 3
            || ss[1..] != sw[1..]
            || sw[0] == 0
            || ss[0] % sw[0] != 0
            || (exclude_diag && ss[1] != ss[2])
        {
            return Err(mismatch("masked_softmax", &ss, &sw));
        }
        let (bt, r, c) = (ss[0], ss[1], ss[2]);
        let bw = sw[0];
        let s = self.value(scores).data();
        let w = self.value(weights).data();
        let mut out = vec![F::zero(); bt * r * c];
        for t in 0..bt {
            let wt = t % bw;
            for i in 0..r {
                let so = (t * r + i) * c;
                let wo = (wt * r + i) * c;
                masked_row(
                    &s[so..so + c],
                    &w[wo..wo + c],
                    if exclude_diag { Some(i) } else { None },
                    &mut out[so..so + c],
                );
            }
        }
        Ok(self.push(
            Tensor::new(ss, out)?,
            Op::MaskedSoftmax {
                scores,
                weights,
                exclude_diag,
            },
        ))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, AutodiffError> {
        let c = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p).len() != 1 || self.shape(p)[0] != c {
                return Err(mismatch("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let eps = F::lit(eps);
        let cf = F::from_usize(c).unwrap();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let src = self.value(x).data();
        let rows = src.len() / c.max(1);
        let mut out = vec![F::zero(); src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let rs = F::one() / (var + eps).sqrt();
            for j in 0..c {
                dst[j] = (row[j] - mean) * rs * g[j] + b[j];
            }
            rstd.push(rs);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, rstd },
        ))
    }

    /// `x / sqrt(|x|² + eps)` over the last axis.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let c = self.value(a).last_dim();
        let eps = F::lit(eps);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        let mut norms = Vec::with_capacity(src.len() / c.max(1));
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            let n = (row.iter().map(|&v| v * v).sum::<F>() + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v / n;
            }
            norms.push(n);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::L2Normalize { a, norms })
    }

    /// Inverted dropout. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Var {
        if !training || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let scale = F::lit(1.0 / keep);
        let mask: Vec<F> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { F::zero() })
            .collect();
        let out: Vec<F> = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Dropout { a, mask })
    }

    /// Rows of a `[rows, dim]` table, one per index: `[indices.len(), dim]`.
    pub fn embedding_gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(invalid("embedding_gather", format!("table must be rank 2, got {st:?}")));
        }
        let (rows, dim) = (st[0], st[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &ix in indices {
            if ix >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: ix, rows });
            }
            out.extend_from_slice(&src[ix * dim..(ix + 1) * dim]);
        }
        Ok(self.push(
            Tensor::new(vec![indices.len(), dim], out)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Per-feature affine embedding of scalar inputs:
    /// `out[b, i, :] = values[b, i] · weight[i, :] + bias[i, :]`.
    pub fn numeric_tokens(&mut self, values: &Tensor<F>, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
        let sw = self.shape(weight).to_vec();
        let sv = values.shape().to_vec();
        if sw.len() != 2 || self.shape(bias) != sw.as_slice() || sv.len() != 2 || sv[1] != sw[0] {
            return Err(mismatch("numeric_tokens", &sv, &sw));
        }
        let (batch, nf, dim) = (sv[0], sw[0], sw[1]);
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(batch * nf * dim);
        for s in 0..batch {
            for i in 0..nf {
                let v = values.data()[s * nf + i];
                out.extend((0..dim).map(|j| v * w[i * dim + j] + b[i * dim + j]));
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch, nf, dim], out)?,
            Op::NumericTokens {
                values: values.data().to_vec(),
                weight,
                bias,
            },
        ))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &x)| d != axis && x != first[d])
            {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::from_usize(self.value(a).numel().max(1)).unwrap();
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean { a })
    }

    /// `[b, n, h·m] -> [b·h, n, m]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(invalid("split_heads", format!("cannot split {s:?} into {heads} heads")));
        }
        let (b, n, w) = (s[0], s[1], s[2]);
        let m = w / heads;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for bi in 0..b {
            for i in 0..n {
                for h in 0..heads {
                    let d = ((bi * heads + h) * n + i) * m;
                    let o = (bi * n + i) * w + h * m;
                    out[d..d + m].copy_from_slice(&src[o..o + m]);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b * heads, n, m], out)?, Op::SplitHeads { a, heads }))
    }

    /// `[b·h, n, m] -> [b, n, h·m]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(invalid("merge_heads", format!("cannot merge {s:?} over {heads} heads")));
        }
        let (b, n, m) = (s[0] / heads, s[1], s[2]);
        let w = heads * m;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for bi in 0..b {
            for i in 0..n {
                for h in 0..heads {
                    let o = ((bi * heads + h) * n + i) * m;
                    let d = (bi * n + i) * w + h * m;
                    out[d..d + m].copy_from_slice(&src[o..o + m]);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, n, w], out)?, Op::MergeHeads { a, heads }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// Hard gate `1[soft > threshold]` whose backward is the identity.
    pub fn straight_through_gate(&mut self, soft: Var, threshold: f64) -> Var {
        let t = F::lit(threshold);
        self.unary(
            soft,
            |x| if x > t { F::one() } else { F::zero() },
            Op::StraightThrough { a: soft },
        )
    }

    /// Mean cross-entropy of `[batch, classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(mismatch("cross_entropy", &s, &[targets.len()]));
        }
        let c = s[1];
        let src = self.value(logits).data();
        let mut total = F::zero();
        for (row, &t) in src.chunks(c).zip(targets) {
            if t >= c {
                return Err(AutodiffError::IndexOutOfRange { index: t, rows: c });
            }
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / F::from_usize(targets.len().max(1)).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean squared error of predictions (any shape with one value per
    /// target) against targets.
    pub fn mse(&mut self, pred: Var, targets: &[F]) -> Result<Var, AutodiffError> {
        if self.value(pred).numel() != targets.len() {
            return Err(mismatch("mse", self.shape(pred), &[targets.len()]));
        }
        let n = F::from_usize(targets.len().max(1)).unwrap();
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<F>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                targets: targets.to_vec(),
            },
        ))
    }
}

pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}

/// Largest exponent used for unsupported entries when forming weight
/// gradients; keeps `exp` finite in single precision.
pub(crate) const MAX_EXPONENT: f64 = 60.0;

fn masked_row<F: Scalar>(s: &[F], w: &[F], diag: Option<usize>, out: &mut [F]) {
    let allowed = |j: usize| w[j] != F::zero() && Some(j) != diag;
    let mut max = F::neg_infinity();
    for (j, &v) in s.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        out.iter_mut().for_each(|o| *o = F::zero());
        return;
    }
    let mut z = F::zero();
    for (j, o) in out.iter_mut().enumerate() {
        *o = if allowed(j) { w[j] * (s[j] - max).exp() } else { F::zero() };
        z += *o;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}
