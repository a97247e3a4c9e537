use super::graph::{log_sum_exp, Op, GELU_C, MAX_EXPONENT};
use super::{AutodiffError, Graph, ParamStore, Scalar, Tensor, Var};

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to `v`; all zeros when `v` did not influence
    /// the loss.
    pub fn get(&self, v: Var) -> Tensor<F> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn slot<'a, F: Scalar>(grads: &'a mut [Option<Vec<F>>], sizes: &[usize], v: Var) -> &'a mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); sizes[v.0]])
}

impl<F: Scalar> Graph<F> {
    /// Reverse pass from a scalar `loss`. Parameter leaves add their
    /// gradient into `store`; calling twice accumulates twice.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<Gradients<F>, AutodiffError> {
        let ls = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(ls));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x = *x + *x);
            }
            self.backward_node(i, &g, &mut grads, &sizes);
            if self.fault == Some(node.op.kind()) {
                let half = F::lit(0.5);
                g.iter_mut().for_each(|x| *x *= half);
            }
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, &grads[i]) {
                let p = store.get_mut(id);
                for (acc, &d) in p.grad.iter_mut().zip(g) {
                    *acc += d;
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>], sizes: &[usize]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sb = shp(*b);
                let (k, p) = (sb[0], sb[1]);
                let m = sizes[a.0] / k.max(1);
                F::gemm_raw(m, p, k, g, (p as isize, 1), val(*b), (1, p as isize), slot(grads, sizes, *a), F::one());
                F::gemm_raw(k, m, p, val(*a), (1, k as isize), g, (p as isize, 1), slot(grads, sizes, *b), F::one());
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = shp(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let p = node.value.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                {
                    let ga = slot(grads, sizes, *a);
                    for t in 0..bt {
                        let bs = &bv[t * k * p..(t + 1) * k * p];
                        // dA = dC · op(B)ᵀ
                        let strides = if *trans_b { (k as isize, 1) } else { (1, p as isize) };
                        F::gemm_raw(m, p, k, &g[t * m * p..(t + 1) * m * p], (p as isize, 1), bs, strides, &mut ga[t * m * k..(t + 1) * m * k], F::one());
                    }
                }
                let gb = slot(grads, sizes, *b);
                for t in 0..bt {
                    let at = &av[t * m * k..(t + 1) * m * k];
                    let gt = &g[t * m * p..(t + 1) * m * p];
                    let dst = &mut gb[t * k * p..(t + 1) * k * p];
                    if *trans_b {
                        // dB (p×k) = dCᵀ · A
                        F::gemm_raw(p, m, k, gt, (1, p as isize), at, (k as isize, 1), dst, F::one());
                    } else {
                        // dB (k×p) = Aᵀ · dC
                        F::gemm_raw(k, m, p, at, (1, k as isize), gt, (p as isize, 1), dst, F::one());
                    }
                }
            }
            Op::Transpose { a } => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = out.len() / (r * c).max(1);
                let ga = slot(grads, sizes, *a);
                // output is [.., r, c]; input is [.., c, r]
                for t in 0..batch {
                    let base = t * r * c;
                    for x in 0..r {
                        for y in 0..c {
                            ga[base + y * r + x] += g[base + x * c + y];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                add_into(slot(grads, sizes, *a), g);
                add_into(slot(grads, sizes, *b), g);
            }
            Op::AddRow { a, row } => {
                add_into(slot(grads, sizes, *a), g);
                let c = sizes[row.0];
                let gr = slot(grads, sizes, *row);
                for chunk in g.chunks(c) {
                    add_into(gr, chunk);
                }
            }
            Op::AddCol { a, col } => {
                add_into(slot(grads, sizes, *a), g);
                let rows = shp(*a)[0];
                let cols = g.len() / rows.max(1);
                let len = sizes[col.0];
                let gc = slot(grads, sizes, *col);
                for r in 0..rows {
                    gc[r % len] += g[r * cols..(r + 1) * cols].iter().copied().sum::<F>();
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let ga = slot(grads, sizes, *a);
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *d += gi * y;
                }
                let gb = slot(grads, sizes, *b);
                for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                    *d += gi * x;
                }
            }
            Op::MulRow { a, row } => {
                let (av, rv) = (val(*a), val(*row));
                let c = rv.len();
                let ga = slot(grads, sizes, *a);
                for (gchunk, dchunk) in g.chunks(c).zip(ga.chunks_mut(c)) {
                    for j in 0..c {
                        dchunk[j] += gchunk[j] * rv[j];
                    }
                }
                let gr = slot(grads, sizes, *row);
                for (gchunk, achunk) in g.chunks(c).zip(av.chunks(c)) {
                    for j in 0..c {
                        gr[j] += gchunk[j] * achunk[j];
                    }
                }
            }
            Op::Scale { a, c } => {
                let ga = slot(grads, sizes, *a);
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }
            Op::Sigmoid { a } => {
                let ga = slot(grads, sizes, *a);
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (F::one() - y);
                }
            }
            Op::Relu { a } => {
                let av = val(*a);
                let ga = slot(grads, sizes, *a);
                for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                    if x > F::zero() {
                        *d += gi;
                    }
                }
            }
            Op::Gelu { a } => {
                let av = val(*a);
                let ga = slot(grads, sizes, *a);
                let c = F::lit(GELU_C);
                let k = F::lit(0.044715);
                let half = F::lit(0.5);
                for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (F::one() + F::lit(3.0) * k * x * x);
                    let deriv = half * (F::one() + t) + half * x * (F::one() - t * t) * du;
                    *d += gi * deriv;
                }
            }
            Op::RowSoftmax { a } => {
                let c = node.value.last_dim();
                let ga = slot(grads, sizes, *a);
                for ((yrow, grow), drow) in out.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: F = yrow.iter().zip(grow).map(|(&y, &gi)| y * gi).sum();
                    for j in 0..c {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::MaskedSoftmax {
                scores,
                weights,
                exclude_diag,
            } => {
                let s = node.value.shape();
                let (bt, r, c) = (s[0], s[1], s[2]);
                let bw = shp(*weights)[0];
                let (sv, wv) = (val(*scores), val(*weights));
                {
                    let gs = slot(grads, sizes, *scores);
                    for row in 0..bt * r {
                        let o = row * c;
                        let y = &out[o..o + c];
                        let gr = &g[o..o + c];
                        let dot: F = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gs[o + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
                let gw = slot(grads, sizes, *weights);
                let cap = F::lit(MAX_EXPONENT);
                for t in 0..bt {
                    let wt = t % bw;
                    for i in 0..r {
                        let so = (t * r + i) * c;
                        let wo = (wt * r + i) * c;
                        let diag = if *exclude_diag { Some(i) } else { None };
                        let allowed = |j: usize| wv[wo + j] != F::zero() && Some(j) != diag;
                        let mut max = F::neg_infinity();
                        for j in 0..c {
                            if allowed(j) && sv[so + j] > max {
                                max = sv[so + j];
                            }
                        }
                        if max == F::neg_infinity() {
                            continue;
                        }
                        let z: F = (0..c)
                            .filter(|&j| allowed(j))
                            .map(|j| wv[wo + j] * (sv[so + j] - max).exp())
                            .sum();
                        let y = &out[so..so + c];
                        let gr = &g[so..so + c];
                        let dot: F = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            if Some(j) == diag {
                                continue;
                            }
                            let e = (sv[so + j] - max).min(cap).exp();
                            gw[wo + j] += e / z * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let c = node.value.last_dim();
                let cf = F::from_usize(c).unwrap();
                let xv = val(*x);
                let gv = val(*gamma).to_vec();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                {
                    let gx = slot(grads, sizes, *x);
                    let mut xhat = vec![F::zero(); c];
                    let mut dxhat = vec![F::zero(); c];
                    for (r, ((xrow, grow), drow)) in xv.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let mean = xrow.iter().copied().sum::<F>() / cf;
                        let rs = rstd[r];
                        for j in 0..c {
                            xhat[j] = (xrow[j] - mean) * rs;
                            dxhat[j] = grow[j] * gv[j];
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<F>() / cf;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() / cf;
                        for j in 0..c {
                            drow[j] += rs * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                add_into(slot(grads, sizes, *gamma), &dgamma);
                add_into(slot(grads, sizes, *beta), &dbeta);
            }
            Op::L2Normalize { a, norms } => {
                let c = node.value.last_dim();
                let ga = slot(grads, sizes, *a);
                for (r, ((yrow, grow), drow)) in out.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)).enumerate() {
                    let dot: F = yrow.iter().zip(grow).map(|(&y, &gi)| y * gi).sum();
                    for j in 0..c {
                        drow[j] += (grow[j] - yrow[j] * dot) / norms[r];
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let ga = slot(grads, sizes, *a);
                for ((d, &gi), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::Gather { table, indices } => {
                let dim = shp(*table)[1];
                let gt = slot(grads, sizes, *table);
                for (k, &ix) in indices.iter().enumerate() {
                    add_into(&mut gt[ix * dim..(ix + 1) * dim], &g[k * dim..(k + 1) * dim]);
                }
            }
            Op::NumericTokens { values, weight, bias } => {
                let sw = shp(*weight);
                let (nf, dim) = (sw[0], sw[1]);
                let batch = values.len() / nf.max(1);
                {
                    let gw = slot(grads, sizes, *weight);
                    for s in 0..batch {
                        for f in 0..nf {
                            let v = values[s * nf + f];
                            let o = (s * nf + f) * dim;
                            for j in 0..dim {
                                gw[f * dim + j] += v * g[o + j];
                            }
                        }
                    }
                }
                let gb = slot(grads, sizes, *bias);
                for s in 0..batch {
                    add_into(gb, &g[s * nf * dim..(s + 1) * nf * dim]);
                }
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = shp(v)[*axis] * inner;
                    let gv = slot(grads, sizes, v);
                    for o in 0..outer {
                        add_into(&mut gv[o * len..(o + 1) * len], &g[o * total + offset..o * total + offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Sum { a } => {
                let ga = slot(grads, sizes, *a);
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { a } => {
                let n = F::from_usize(sizes[a.0].max(1)).unwrap();
                let ga = slot(grads, sizes, *a);
                ga.iter_mut().for_each(|d| *d += g[0] / n);
            }
            Op::SplitHeads { a, heads } => {
                let s = shp(*a);
                let (b, n, w) = (s[0], s[1], s[2]);
                let m = w / heads;
                let ga = slot(grads, sizes, *a);
                for bi in 0..b {
                    for i in 0..n {
                        for h in 0..*heads {
                            let d = ((bi * heads + h) * n + i) * m;
                            let o = (bi * n + i) * w + h * m;
                            add_into(&mut ga[o..o + m], &g[d..d + m]);
                        }
                    }
                }
            }
            Op::MergeHeads { a, heads } => {
                let s = shp(*a);
                let (b, n, m) = (s[0] / heads, s[1], s[2]);
                let w = heads * m;
                let ga = slot(grads, sizes, *a);
                for bi in 0..b {
                    for i in 0..n {
                        for h in 0..*heads {
                            let o = ((bi * heads + h) * n + i) * m;
                            let d = (bi * n + i) * w + h * m;
                            add_into(&mut ga[o..o + m], &g[d..d + m]);
                        }
                    }
                }
            }
            Op::Reshape { a } | Op::StraightThrough { a } => {
                add_into(slot(grads, sizes, *a), g);
            }
            Op::CrossEntropy { logits, targets } => {
                let c = shp(*logits)[1];
                let lv = val(*logits);
                let scale = g[0] / F::from_usize(targets.len().max(1)).unwrap();
                let gl = slot(grads, sizes, *logits);
                for ((row, drow), &t) in lv.chunks(c).zip(gl.chunks_mut(c)).zip(targets) {
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        let onehot = if j == t { F::one() } else { F::zero() };
                        drow[j] += scale * (p - onehot);
                    }
                }
            }
            Op::Mse { pred, targets } => {
                let pv = val(*pred);
                let scale = g[0] * F::lit(2.0) / F::from_usize(targets.len().max(1)).unwrap();
                let gp = slot(grads, sizes, *pred);
                for ((d, &p), &t) in gp.iter_mut().zip(pv).zip(targets) {
                    *d += scale * (p - t);
                }
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
