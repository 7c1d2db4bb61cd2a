//! Tape-based reverse-mode differentiation over the operation set the
//! PEL pipeline needs.
//!
//! A [`Tape`] records every forward operation as a node holding its
//! inputs, its output value and whatever the adjoint rule needs. Nodes
//! are appended in execution order, so inputs always precede their
//! consumers and [`Tape::backward`] is a single reverse sweep.
//!
//! There is deliberately no general broadcasting engine: each broadcast
//! pattern used by the network (row vector over rows, per-sample row
//! over a point set, per-channel scale) is its own operation with an
//! explicit adjoint.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    /// x: [.., K] times w: [K, M].
    Matmul { x: ValId, w: ValId },
    /// y[.., k] = x[.., k] * s[k], s: [K].
    ColScale { x: ValId, s: ValId },
    /// y[.., k] = x[.., k] + b[k], b: [K].
    AddRow { x: ValId, b: ValId },
    /// x: [S, N, K] plus r: [S, 1, K] broadcast over the point axis.
    AddBcastRows { x: ValId, r: ValId },
    Add { a: ValId, b: ValId },
    /// Elementwise add of a constant tensor (no gradient to it).
    AddConst { x: ValId },
    /// Elementwise multiply by a constant tensor (no gradient to it).
    MulConst { x: ValId, c: Tensor<F> },
    /// a*x + b with scalar constants.
    Affine { x: ValId, a: F },
    /// Per-column maximum over the point axis; [S, N, K] -> [S, 1, K].
    /// `argmax` stores the winning row per (sample, column), lowest row
    /// index on ties; the adjoint routes there exclusively.
    ColMax { x: ValId, argmax: Vec<usize> },
    Sigmoid { x: ValId },
    Relu { x: ValId },
    /// Training-mode batch norm; statistics over every leading axis.
    BatchNorm {
        x: ValId,
        scale: ValId,
        shift: ValId,
        xhat: Tensor<F>,
        inv_std: Vec<F>,
    },
    /// Inference-mode batch norm folded to y = a*x + b from running stats.
    BatchNormFrozen { x: ValId, a: Vec<F> },
    /// Epsilon offset guarding a following log.
    ClampEps { x: ValId },
    Square { x: ValId },
    Log { x: ValId },
    SumAll { x: ValId },
    /// Importance-weighted mean over the point axis with an unweighted
    /// fallback for near-zero weight columns.
    /// g: [S, N, J], d: [S, N, J*bins] -> [S, 1, J*bins].
    VoteMerge {
        g: ValId,
        d: ValId,
        bins: usize,
        weight_sums: Vec<F>,
        fallback: Vec<bool>,
    },
    /// Concatenation along the channel axis.
    Concat { a: ValId, b: ValId },
    /// Channel-axis slice [lo, hi).
    SliceCols { x: ValId, lo: usize },
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    param: Option<ParamId>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    /// When set, every op output is checked for NaN/Inf.
    pub check_finite: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: ValId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }
}

/// (sample count, point count, channels) view of a rank-2/3 shape.
fn snk(shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match shape {
        [n, k] => Ok((1, *n, *k)),
        [s, n, k] => Ok((*s, *n, *k)),
        _ => Err(TensorError::BadRank {
            op: "snk",
            expected: "rank 2 or 3",
            shape: shape.to_vec(),
        }),
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    pub fn value(&self, id: ValId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, param: Option<ParamId>) -> Result<ValId, TensorError> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node { op, value, param });
        Ok(ValId(self.nodes.len() - 1))
    }

    /// A constant leaf: participates in the graph, receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> ValId {
        self.push(Op::Leaf, value, None).expect("leaf push")
    }

    /// A differentiable leaf bound to a stored parameter; after
    /// [`Tape::backward_into`] its adjoint accumulates on that parameter.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> ValId {
        self.push(Op::Leaf, store.get(id).value.clone(), Some(id))
            .expect("leaf push")
    }

    pub fn matmul(&mut self, x: ValId, w: ValId) -> Result<ValId, TensorError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 {
            return Err(TensorError::BadRank {
                op: "matmul",
                expected: "rank-2 weight",
                shape: wv.shape().to_vec(),
            });
        }
        let (k, m) = (wv.shape()[0], wv.shape()[1]);
        if xv.cols() != k {
            return Err(mismatch("matmul", xv.shape(), wv.shape()));
        }
        let rows = xv.rows();
        let mut out_shape = xv.leading().to_vec();
        out_shape.push(m);
        let mut out = Tensor::zeros(out_shape);
        F::gemm(rows, k, m, F::one(), xv.data(), wv.data(), F::zero(), out.data_mut());
        self.push(Op::Matmul { x, w }, out, None)
    }

    pub fn col_scale(&mut self, x: ValId, s: ValId) -> Result<ValId, TensorError> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.shape().len() != 1 || sv.cols() != xv.cols() {
            return Err(mismatch("col_scale", xv.shape(), sv.shape()));
        }
        let k = xv.cols();
        let sd = sv.data();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(k) {
            for (v, &si) in row.iter_mut().zip(sd) {
                *v = *v * si;
            }
        }
        self.push(Op::ColScale { x, s }, out, None)
    }

    pub fn add_row(&mut self, x: ValId, b: ValId) -> Result<ValId, TensorError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.shape().len() != 1 || bv.cols() != xv.cols() {
            return Err(mismatch("add_row", xv.shape(), bv.shape()));
        }
        let k = xv.cols();
        let bd = bv.data();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(k) {
            for (v, &bi) in row.iter_mut().zip(bd) {
                *v = *v + bi;
            }
        }
        self.push(Op::AddRow { x, b }, out, None)
    }

    pub fn add_bcast_rows(&mut self, x: ValId, r: ValId) -> Result<ValId, TensorError> {
        let (xv, rv) = (self.value(x), self.value(r));
        let (s, n, k) = snk(xv.shape())?;
        let (rs, rn, rk) = snk(rv.shape())?;
        if rs != s || rn != 1 || rk != k {
            return Err(mismatch("add_bcast_rows", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        let rd = rv.data();
        for si in 0..s {
            let row = &rd[si * k..(si + 1) * k];
            let block = &mut out.data_mut()[si * n * k..(si + 1) * n * k];
            for prow in block.chunks_mut(k) {
                for (v, &ri) in prow.iter_mut().zip(row) {
                    *v = *v + ri;
                }
            }
        }
        self.push(Op::AddBcastRows { x, r }, out, None)
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for (v, &bi) in out.data_mut().iter_mut().zip(bv.data()) {
            *v = *v + bi;
        }
        self.push(Op::Add { a, b }, out, None)
    }

    pub fn add_const(&mut self, x: ValId, c: &Tensor<F>) -> Result<ValId, TensorError> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(mismatch("add_const", xv.shape(), c.shape()));
        }
        let mut out = xv.clone();
        for (v, &ci) in out.data_mut().iter_mut().zip(c.data()) {
            *v = *v + ci;
        }
        self.push(Op::AddConst { x }, out, None)
    }

    pub fn mul_const(&mut self, x: ValId, c: &Tensor<F>) -> Result<ValId, TensorError> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(mismatch("mul_const", xv.shape(), c.shape()));
        }
        let mut out = xv.clone();
        for (v, &ci) in out.data_mut().iter_mut().zip(c.data()) {
            *v = *v * ci;
        }
        self.push(Op::MulConst { x, c: c.clone() }, out, None)
    }

    /// a*x + b elementwise with scalar constants.
    pub fn affine(&mut self, x: ValId, a: f64, b: f64) -> Result<ValId, TensorError> {
        let (af, bf) = (F::from_f64(a), F::from_f64(b));
        let out = self.value(x).map(|v| af * v + bf);
        self.push(Op::Affine { x, a: af }, out, None)
    }

    pub fn col_max(&mut self, x: ValId) -> Result<ValId, TensorError> {
        let xv = self.value(x);
        let (s, n, k) = snk(xv.shape())?;
        let xd = xv.data();
        let mut argmax = vec![0usize; s * k];
        let mut out_shape = xv.shape().to_vec();
        let ax = out_shape.len() - 2;
        out_shape[ax] = 1;
        let mut out = Tensor::zeros(out_shape);
        for si in 0..s {
            let block = &xd[si * n * k..(si + 1) * n * k];
            let dst = &mut out.data_mut()[si * k..(si + 1) * k];
            for col in 0..k {
                let mut best = block[col];
                let mut best_row = 0usize;
                for row in 1..n {
                    let v = block[row * k + col];
                    // strict comparison keeps the lowest row on ties
                    if v > best {
                        best = v;
                        best_row = row;
                    }
                }
                dst[col] = best;
                argmax[si * k + col] = best_row;
            }
        }
        self.push(Op::ColMax { x, argmax }, out, None)
    }

    pub fn sigmoid(&mut self, x: ValId) -> Result<ValId, TensorError> {
        let one = F::one();
        let out = self.value(x).map(|v| one / (one + (-v).exp()));
        self.push(Op::Sigmoid { x }, out, None)
    }

    pub fn relu(&mut self, x: ValId) -> Result<ValId, TensorError> {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(Op::Relu { x }, out, None)
    }

    /// Training-mode batch normalization per channel, statistics over all
    /// leading axes (batch and points jointly). Returns the node plus the
    /// batch mean/variance so the caller can update running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: ValId,
        scale: ValId,
        shift: ValId,
        eps: f64,
    ) -> Result<(ValId, Vec<F>, Vec<F>), TensorError> {
        let xv = self.value(x);
        let k = xv.cols();
        let rows = xv.rows();
        let (sv, bv) = (self.value(scale), self.value(shift));
        if sv.shape() != [k] || bv.shape() != [k] {
            return Err(mismatch("batch_norm", xv.shape(), sv.shape()));
        }
        let xd = xv.data();
        let inv_rows = F::from_f64(1.0 / rows as f64);
        let mut mean = vec![F::zero(); k];
        for row in xd.chunks(k) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        for m in &mut mean {
            *m = *m * inv_rows;
        }
        let mut var = vec![F::zero(); k];
        for row in xd.chunks(k) {
            for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *vv = *vv + d * d;
            }
        }
        for v in &mut var {
            *v = *v * inv_rows;
        }
        let epsf = F::from_f64(eps);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + epsf).sqrt()).collect();
        let mut xhat = Tensor::zeros(xv.shape().to_vec());
        {
            let xh = xhat.data_mut();
            for (r, row) in xd.chunks(k).enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    xh[r * k + c] = (v - mean[c]) * inv_std[c];
                }
            }
        }
        let sd = sv.data().to_vec();
        let bd = bv.data().to_vec();
        let mut out = Tensor::zeros(xv.shape().to_vec());
        {
            let od = out.data_mut();
            for (r, row) in xhat.data().chunks(k).enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    od[r * k + c] = sd[c] * v + bd[c];
                }
            }
        }
        let id = self.push(
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            out,
            None,
        )?;
        Ok((id, mean, var))
    }

    /// Inference-mode batch norm: running statistics folded into a fixed
    /// per-channel affine map.
    pub fn batch_norm_frozen(
        &mut self,
        x: ValId,
        scale: &[F],
        shift: &[F],
        running_mean: &[F],
        running_var: &[F],
        eps: f64,
    ) -> Result<ValId, TensorError> {
        let xv = self.value(x);
        let k = xv.cols();
        if scale.len() != k || running_mean.len() != k {
            return Err(TensorError::Invalid(format!(
                "batch_norm_frozen: {k} channels vs {} stats",
                running_mean.len()
            )));
        }
        let epsf = F::from_f64(eps);
        let a: Vec<F> = scale
            .iter()
            .zip(running_var)
            .map(|(&s, &v)| s / (v + epsf).sqrt())
            .collect();
        let b: Vec<F> = shift
            .iter()
            .zip(running_mean.iter().zip(&a))
            .map(|(&sh, (&m, &ai))| sh - m * ai)
            .collect();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(k) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[c] * *v + b[c];
            }
        }
        self.push(Op::BatchNormFrozen { x, a }, out, None)
    }

    /// Adds a small positive offset, guarding a following `log`.
    pub fn clamp_eps(&mut self, x: ValId, eps: f64) -> Result<ValId, TensorError> {
        let e = F::from_f64(eps);
        let out = self.value(x).map(|v| v + e);
        self.push(Op::ClampEps { x }, out, None)
    }

    pub fn square(&mut self, x: ValId) -> Result<ValId, TensorError> {
        let out = self.value(x).map(|v| v * v);
        self.push(Op::Square { x }, out, None)
    }

    pub fn log(&mut self, x: ValId) -> Result<ValId, TensorError> {
        let out = self.value(x).map(|v| v.ln());
        self.push(Op::Log { x }, out, None)
    }

    pub fn sum_all(&mut self, x: ValId) -> Result<ValId, TensorError> {
        let mut acc = F::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        self.push(Op::SumAll { x }, Tensor::scalar(acc), None)
    }

    /// Importance-weighted merge of per-point votes (the voting scheme's
    /// weighted mean). `g`: [S, N, J] weights, `d`: [S, N, J*bins] votes
    /// grouped per pose dimension. Columns whose weight sum falls below
    /// 1e-8 fall back to the unweighted mean.
    pub fn vote_merge(&mut self, g: ValId, d: ValId, bins: usize) -> Result<ValId, TensorError> {
        let (gv, dv) = (self.value(g), self.value(d));
        let (s, n, j) = snk(gv.shape())?;
        let (ds, dn, dk) = snk(dv.shape())?;
        if ds != s || dn != n || dk != j * bins {
            return Err(mismatch("vote_merge", gv.shape(), dv.shape()));
        }
        let tiny = F::from_f64(1e-8);
        let inv_n = F::from_f64(1.0 / n as f64);
        let gd = gv.data();
        let dd = dv.data();
        let mut weight_sums = vec![F::zero(); s * j];
        let mut fallback = vec![false; s * j];
        let mut out_shape = dv.shape().to_vec();
        let ax = out_shape.len() - 2;
        out_shape[ax] = 1;
        let mut out = Tensor::zeros(out_shape);
        for si in 0..s {
            let gblock = &gd[si * n * j..(si + 1) * n * j];
            let dblock = &dd[si * n * dk..(si + 1) * n * dk];
            let oblock = &mut out.data_mut()[si * dk..(si + 1) * dk];
            for ji in 0..j {
                let mut sum_g = F::zero();
                for row in 0..n {
                    sum_g = sum_g + gblock[row * j + ji];
                }
                weight_sums[si * j + ji] = sum_g;
                let fb = sum_g < tiny;
                fallback[si * j + ji] = fb;
                for b in 0..bins {
                    let col = ji * bins + b;
                    let mut acc = F::zero();
                    if fb {
                        for row in 0..n {
                            acc = acc + dblock[row * dk + col];
                        }
                        oblock[col] = acc * inv_n;
                    } else {
                        for row in 0..n {
                            acc = acc + gblock[row * j + ji] * dblock[row * dk + col];
                        }
                        oblock[col] = acc / sum_g;
                    }
                }
            }
        }
        self.push(
            Op::VoteMerge {
                g,
                d,
                bins,
                weight_sums,
                fallback,
            },
            out,
            None,
        )
    }

    pub fn concat(&mut self, a: ValId, b: ValId) -> Result<ValId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.leading() != bv.leading() {
            return Err(mismatch("concat", av.shape(), bv.shape()));
        }
        let (ka, kb) = (av.cols(), bv.cols());
        let mut out_shape = av.leading().to_vec();
        out_shape.push(ka + kb);
        let mut out = Tensor::zeros(out_shape);
        {
            let od = out.data_mut();
            for r in 0..av.rows() {
                od[r * (ka + kb)..r * (ka + kb) + ka]
                    .copy_from_slice(&av.data()[r * ka..(r + 1) * ka]);
                od[r * (ka + kb) + ka..(r + 1) * (ka + kb)]
                    .copy_from_slice(&bv.data()[r * kb..(r + 1) * kb]);
            }
        }
        self.push(Op::Concat { a, b }, out, None)
    }

    pub fn slice_cols(&mut self, x: ValId, lo: usize, hi: usize) -> Result<ValId, TensorError> {
        let xv = self.value(x);
        let k = xv.cols();
        if lo >= hi || hi > k {
            return Err(TensorError::Invalid(format!(
                "slice_cols range {lo}..{hi} outside 0..{k}"
            )));
        }
        let w = hi - lo;
        let mut out_shape = xv.leading().to_vec();
        out_shape.push(w);
        let mut out = Tensor::zeros(out_shape);
        {
            let od = out.data_mut();
            for r in 0..xv.rows() {
                od[r * w..(r + 1) * w].copy_from_slice(&xv.data()[r * k + lo..r * k + hi]);
            }
        }
        self.push(Op::SliceCols { x, lo }, out, None)
    }

    /// Reverse sweep from a scalar loss. Returns per-node adjoints.
    pub fn backward(&self, loss: ValId) -> Result<Gradients<F>, TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for idx in (0..=loss.0).rev() {
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.adjoint(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Backward plus accumulation of leaf adjoints onto their parameters.
    pub fn backward_into(
        &self,
        loss: ValId,
        store: &mut ParamStore<F>,
    ) -> Result<(), TensorError> {
        let grads = self.backward(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads.grads[idx].as_ref()) {
                let p = store.get_mut(pid);
                debug_assert_eq!(p.value.shape(), g.shape());
                for (pg, &gi) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *pg = *pg + gi;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], id: ValId, delta: Tensor<F>) {
        match &mut grads[id.0] {
            Some(g) => {
                for (gi, &di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi = *gi + di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn adjoint(&self, idx: usize, dy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (k, m) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                // dx = dy . w^T
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                // gemm with transposed B: use pointer strides directly
                unsafe_gemm_bt(rows, m, k, dy.data(), wv.data(), dx.data_mut());
                self.accumulate(grads, *x, dx);
                // dw = x^T . dy
                let mut dw = Tensor::zeros(vec![k, m]);
                unsafe_gemm_at(k, rows, m, xv.data(), dy.data(), dw.data_mut());
                self.accumulate(grads, *w, dw);
            }
            Op::ColScale { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let k = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                {
                    let dxd = dx.data_mut();
                    for (r, row) in dy.data().chunks(k).enumerate() {
                        for (c, &g) in row.iter().enumerate() {
                            dxd[r * k + c] = g * sv.data()[c];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                let mut ds = Tensor::zeros(vec![k]);
                {
                    let dsd = ds.data_mut();
                    for (row_dy, row_x) in dy.data().chunks(k).zip(xv.data().chunks(k)) {
                        for c in 0..k {
                            dsd[c] = dsd[c] + row_dy[c] * row_x[c];
                        }
                    }
                }
                self.accumulate(grads, *s, ds);
            }
            Op::AddRow { x, b } => {
                let k = self.value(*x).cols();
                self.accumulate(grads, *x, dy.clone());
                let mut db = Tensor::zeros(vec![k]);
                {
                    let dbd = db.data_mut();
                    for row in dy.data().chunks(k) {
                        for (c, &g) in row.iter().enumerate() {
                            dbd[c] = dbd[c] + g;
                        }
                    }
                }
                self.accumulate(grads, *b, db);
            }
            Op::AddBcastRows { x, r } => {
                let xv = self.value(*x);
                let (s, n, k) = snk(xv.shape()).expect("checked at forward");
                self.accumulate(grads, *x, dy.clone());
                let mut dr = Tensor::zeros(self.value(*r).shape().to_vec());
                {
                    let drd = dr.data_mut();
                    for si in 0..s {
                        let block = &dy.data()[si * n * k..(si + 1) * n * k];
                        for row in block.chunks(k) {
                            for (c, &g) in row.iter().enumerate() {
                                drd[si * k + c] = drd[si * k + c] + g;
                            }
                        }
                    }
                }
                self.accumulate(grads, *r, dr);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::AddConst { x } | Op::ClampEps { x } => {
                self.accumulate(grads, *x, dy.clone());
            }
            Op::MulConst { x, c } => {
                let mut dx = dy.clone();
                for (v, &ci) in dx.data_mut().iter_mut().zip(c.data()) {
                    *v = *v * ci;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Affine { x, a } => {
                let a = *a;
                self.accumulate(grads, *x, dy.map(|v| v * a));
            }
            Op::ColMax { x, argmax } => {
                let xv = self.value(*x);
                let (s, _n, k) = snk(xv.shape()).expect("checked at forward");
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                {
                    let dxd = dx.data_mut();
                    let kstride = xv.cols();
                    for si in 0..s {
                        for col in 0..k {
                            let row = argmax[si * k + col];
                            let base = si * (dxd.len() / s);
                            dxd[base + row * kstride + col] = dy.data()[si * k + col];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let one = F::one();
                let mut dx = dy.clone();
                for (v, &yi) in dx.data_mut().iter_mut().zip(y.data()) {
                    *v = *v * yi * (one - yi);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut dx = dy.clone();
                for (v, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if xi <= F::zero() {
                        *v = F::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let k = xhat.cols();
                let rows = xhat.rows();
                let sv = self.value(*scale);
                let inv_rows = F::from_f64(1.0 / rows as f64);
                let mut dscale = vec![F::zero(); k];
                let mut dshift = vec![F::zero(); k];
                for (row_dy, row_xh) in dy.data().chunks(k).zip(xhat.data().chunks(k)) {
                    for c in 0..k {
                        dscale[c] = dscale[c] + row_dy[c] * row_xh[c];
                        dshift[c] = dshift[c] + row_dy[c];
                    }
                }
                // dx = scale * inv_std * (dy - mean(dy) - xhat * mean(dy*xhat))
                let mut dx = Tensor::zeros(xhat.shape().to_vec());
                {
                    let dxd = dx.data_mut();
                    for r in 0..rows {
                        for c in 0..k {
                            let g = dy.data()[r * k + c];
                            let xh = xhat.data()[r * k + c];
                            dxd[r * k + c] = sv.data()[c]
                                * inv_std[c]
                                * (g - dshift[c] * inv_rows - xh * dscale[c] * inv_rows);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(
                    grads,
                    *scale,
                    Tensor::new(vec![k], dscale).expect("shape"),
                );
                self.accumulate(
                    grads,
                    *shift,
                    Tensor::new(vec![k], dshift).expect("shape"),
                );
            }
            Op::BatchNormFrozen { x, a } => {
                let k = a.len();
                let mut dx = dy.clone();
                for (i, v) in dx.data_mut().iter_mut().enumerate() {
                    *v = *v * a[i % k];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Square { x } => {
                let xv = self.value(*x);
                let two = F::from_f64(2.0);
                let mut dx = dy.clone();
                for (v, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *v = *v * two * xi;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Log { x } => {
                let xv = self.value(*x);
                let mut dx = dy.clone();
                for (v, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *v = *v / xi;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll { x } => {
                let g = dy.scalar_value();
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), g));
            }
            Op::VoteMerge {
                g,
                d,
                bins,
                weight_sums,
                fallback,
            } => {
                let gv = self.value(*g);
                let dv = self.value(*d);
                let (s, n, j) = snk(gv.shape()).expect("checked at forward");
                let dk = j * bins;
                let y = &node.value;
                let inv_n = F::from_f64(1.0 / n as f64);
                let mut dg = Tensor::zeros(gv.shape().to_vec());
                let mut dd = Tensor::zeros(dv.shape().to_vec());
                for si in 0..s {
                    let gblock = &gv.data()[si * n * j..(si + 1) * n * j];
                    let dblock = &dv.data()[si * n * dk..(si + 1) * n * dk];
                    let yblock = &y.data()[si * dk..(si + 1) * dk];
                    let dyblock = &dy.data()[si * dk..(si + 1) * dk];
                    for ji in 0..j {
                        if fallback[si * j + ji] {
                            // unweighted mean: no gradient to g
                            for b in 0..*bins {
                                let col = ji * bins + b;
                                let gout = dyblock[col] * inv_n;
                                for row in 0..n {
                                    let o = si * n * dk + row * dk + col;
                                    dd.data_mut()[o] = dd.data_mut()[o] + gout;
                                }
                            }
                            continue;
                        }
                        let sum_g = weight_sums[si * j + ji];
                        for row in 0..n {
                            let gn = gblock[row * j + ji];
                            let mut dg_acc = F::zero();
                            for b in 0..*bins {
                                let col = ji * bins + b;
                                let gout = dyblock[col];
                                let o = si * n * dk + row * dk + col;
                                dd.data_mut()[o] = dd.data_mut()[o] + gout * gn / sum_g;
                                dg_acc = dg_acc + gout * (dblock[row * dk + col] - yblock[col]);
                            }
                            let gi = si * n * j + row * j + ji;
                            dg.data_mut()[gi] = dg.data_mut()[gi] + dg_acc / sum_g;
                        }
                    }
                }
                self.accumulate(grads, *g, dg);
                self.accumulate(grads, *d, dd);
            }
            Op::Concat { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (ka, kb) = (av.cols(), bv.cols());
                let mut da = Tensor::zeros(av.shape().to_vec());
                let mut db = Tensor::zeros(bv.shape().to_vec());
                for r in 0..av.rows() {
                    da.data_mut()[r * ka..(r + 1) * ka]
                        .copy_from_slice(&dy.data()[r * (ka + kb)..r * (ka + kb) + ka]);
                    db.data_mut()[r * kb..(r + 1) * kb]
                        .copy_from_slice(&dy.data()[r * (ka + kb) + ka..(r + 1) * (ka + kb)]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SliceCols { x, lo } => {
                let xv = self.value(*x);
                let k = xv.cols();
                let w = node.value.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for r in 0..xv.rows() {
                    dx.data_mut()[r * k + lo..r * k + lo + w]
                        .copy_from_slice(&dy.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::ColScale { .. } => "col_scale",
        Op::AddRow { .. } => "add_row",
        Op::AddBcastRows { .. } => "add_bcast_rows",
        Op::Add { .. } => "add",
        Op::AddConst { .. } => "add_const",
        Op::MulConst { .. } => "mul_const",
        Op::Affine { .. } => "affine",
        Op::ColMax { .. } => "col_max",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Relu { .. } => "relu",
        Op::BatchNorm { .. } => "batch_norm",
        Op::BatchNormFrozen { .. } => "batch_norm_frozen",
        Op::ClampEps { .. } => "clamp_eps",
        Op::Square { .. } => "square",
        Op::Log { .. } => "log",
        Op::SumAll { .. } => "sum_all",
        Op::VoteMerge { .. } => "vote_merge",
        Op::Concat { .. } => "concat",
        Op::SliceCols { .. } => "slice_cols",
    }
}

/// C(m x n) = A(m x k) . B(n x k)^T
fn unsafe_gemm_bt<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    // b is stored row-major as (n x k); transpose via strides
    gemm_strided(m, k, n, a, k as isize, 1, b, 1, k as isize, c);
}

/// C(m x n) = A(k x m)^T . B(k x n)
fn unsafe_gemm_at<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    gemm_strided(m, k, n, a, 1, m as isize, b, n as isize, 1, c);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    rsa: isize,
    csa: isize,
    b: &[F],
    rsb: isize,
    csb: isize,
    c: &mut [F],
) {
    // dispatch to the concrete kernels through a tiny shim; only two
    // scalar types exist, so a runtime check keeps the trait surface small
    use std::any::TypeId;
    if TypeId::of::<F>() == TypeId::of::<f64>() {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr() as *const f64,
                rsa,
                csa,
                b.as_ptr() as *const f64,
                rsb,
                csb,
                0.0,
                c.as_mut_ptr() as *mut f64,
                n as isize,
                1,
            );
        }
    } else {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr() as *const f32,
                rsa,
                csa,
                b.as_ptr() as *const f32,
                rsb,
                csb,
                0.0,
                c.as_mut_ptr() as *mut f32,
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_err;

    fn t2(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(vec![rows, cols], vals).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t2(2, 3, &[0.0; 6]));
        let w = tape.constant(t2(2, 2, &[0.0; 4]));
        let err = tape.matmul(a, w).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "got: {err}");
    }

    #[test]
    fn sigmoid_midpoint() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0f64));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).scalar_value(), 0.5);
    }

    #[test]
    fn column_max_by_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 2, &[1.0, 5.0, 3.0, 2.0]));
        let y = tape.col_max(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.0f64));
        let mut tape = Tape::new();
        let wid = tape.param(&store, w);
        let y = tape.sigmoid(wid).unwrap();
        tape.backward_into(y, &mut store).unwrap();
        assert!((store.get(w).grad.scalar_value() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn linear_map_gradient() {
        // loss = sum(x . W) with x fixed => dW[i][j] = sum over rows of x[., i]
        let mut store = ParamStore::new();
        let w = store.add("w", t2(2, 2, &[0.3, -0.7, 1.1, 0.2]));
        let mut tape = Tape::new();
        let x = tape.constant(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let wid = tape.param(&store, w);
        let y = tape.matmul(x, wid).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        // column sums of x are (9, 12), replicated across W's output axis
        assert_eq!(store.get(w).grad.data(), &[9.0, 9.0, 12.0, 12.0]);
    }

    #[test]
    fn col_max_adjoint_routes_to_lowest_tied_row() {
        let mut store = ParamStore::new();
        let x = store.add("x", t2(3, 1, &[2.0, 2.0, 1.0]));
        let mut tape = Tape::new();
        let xid = tape.param(&store, x);
        let y = tape.col_max(xid).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(x).grad.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 2, &[1.0; 4]));
        let y = tape.sigmoid(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.constant(t2(4, 3, &[0.3, 1.7, -0.2, 0.9, -1.4, 0.5, 2.2, 0.1, -0.8, 0.4, 1.1, -2.0]));
            let w = tape.constant(t2(3, 2, &[0.17, -0.45, 0.88, 0.12, -0.33, 0.71]));
            let h = tape.matmul(x, w).unwrap();
            let m = tape.col_max(h).unwrap();
            let a = tape.add_bcast_rows(h, m).unwrap();
            let y = tape.sigmoid(a).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    /// Random 5-parameter graph checked against central finite differences.
    /// The finite-difference oracle is the independent scalar closure below.
    #[test]
    fn random_graph_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        // oracle: plain-f64 evaluation of the same graph
        let eval = |p: &[f64]| -> f64 {
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let mut acc = 0.0;
            for i in 0..3 {
                let h = sig(p[i] * p[i + 2]);
                let q = h + p[i];
                acc += q * q + (h + 0.1).ln();
            }
            acc
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let vals: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut store = ParamStore::<f64>::new();
            let pid = store.add("p", Tensor::from_f64_slice(vec![5], &vals).unwrap());
            let mut tape = Tape::new();
            let p = tape.param(&store, pid);
            let a = tape.slice_cols(p, 0, 3).unwrap();
            let b = tape.slice_cols(p, 2, 5).unwrap();
            let prod = tape.col_scale(a, b).unwrap();
            let h = tape.sigmoid(prod).unwrap();
            let q = tape.add(h, a).unwrap();
            let sq = tape.square(q).unwrap();
            let guarded = tape.clamp_eps(h, 0.1).unwrap();
            let lg = tape.log(guarded).unwrap();
            let total = tape.add(sq, lg).unwrap();
            let loss = tape.sum_all(total).unwrap();
            assert!(rel_err(tape.value(loss).scalar_value(), eval(&vals)) < 1e-12);
            tape.backward_into(loss, &mut store).unwrap();
            let analytic = store.get(pid).grad.to_f64_vec();
            let step = 1e-5;
            for i in 0..5 {
                let mut plus = vals.clone();
                plus[i] += step;
                let mut minus = vals.clone();
                minus[i] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                assert!(
                    rel_err(analytic[i], fd) < 1e-4,
                    "param {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        }
    }
}
