//! Reverse-mode differentiation over an append-only graph.
//!
//! Every op evaluates eagerly when it is recorded, so the value of any node
//! is available as soon as the node exists. Nodes are stored in creation
//! order, which is a topological order; [`Graph::backward`] walks it in
//! reverse.
//!
//! The op set is closed: it is exactly what the encoder and the training
//! objectives need. Broadcasting is limited to adding a bias row.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Param,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LogSoftmax(Var),
    Ln(Var),
    Exp(Var),
    L2Normalize(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Gelu(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    MaskedMean { x: Var, mask: Vec<bool>, batch: usize, seq: usize },
    SliceCols { x: Var, start: usize, end: usize },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Detach,
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
}

/// Names of every recorded op kind.
pub const OP_NAMES: [&str; 26] = [
    "param",
    "constant",
    "matmul",
    "transpose",
    "batch_matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "softmax",
    "log_softmax",
    "ln",
    "exp",
    "l2_normalize",
    "layer_norm",
    "gelu",
    "gather_rows",
    "masked_mean",
    "slice_cols",
    "concat_rows",
    "sum",
    "mean",
    "detach",
    "split_heads",
    "merge_heads",
];

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Ln(..) => "ln",
            Op::Exp(..) => "exp",
            Op::L2Normalize(..) => "l2_normalize",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::GatherRows { .. } => "gather_rows",
            Op::MaskedMean { .. } => "masked_mean",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Detach => "detach",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
        }
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`. Nodes the root does not
    /// depend on get a zero tensor.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.dims[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.dims[v.0]),
        }
    }
}

pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    detached: Vec<Tensor<T>>,
    frozen: Option<Vec<Tensor<T>>>,
    fault: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            detached: Vec::new(),
            frozen: None,
            fault: None,
        }
    }

    /// A graph whose `detach` nodes replay previously recorded values in
    /// order instead of copying their input. Finite-difference checks use
    /// this so that gradient-blocked teachers stay fixed while the student
    /// side is perturbed.
    pub fn with_frozen_detach(values: Vec<Tensor<T>>) -> Self {
        let mut g = Self::new();
        g.frozen = Some(values);
        g
    }

    /// Values produced by every `detach` node so far, in creation order.
    pub fn detached_values(&self) -> &[Tensor<T>] {
        &self.detached
    }

    /// Negates the backward rule of the named op kind. Only useful for
    /// mutation-testing the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, op_name: &str) -> Result<()> {
        let name = OP_NAMES
            .iter()
            .find(|&&n| n == op_name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown op {op_name:?}")))?;
        self.fault = Some(name);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.values[v.0].dims()
    }

    /// Value of a node, named after the forward-evaluation contract. Ops run
    /// eagerly, so this never recomputes anything.
    pub fn forward_eval(&self, root: Var) -> &Tensor<T> {
        self.value(root)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Result<Var> {
        value.check_finite(op.name())?;
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Ok(Var(self.values.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(Op::Param, t, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(Op::Constant, t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_rank(2, "matmul")?;
        bv.expect_rank(2, "matmul")?;
        let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
        if bv.dims()[0] != k {
            return Err(shape_err("matmul", format!("{:?} @ {:?}", av.dims(), bv.dims())));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), t, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let ng = self.ng(a);
        self.push(Op::Transpose(a), t, ng)
    }

    /// `[B,m,k] @ [B,k,n]`, or `[B,m,k] @ [B,n,k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_rank(3, "batch_matmul")?;
        bv.expect_rank(3, "batch_matmul")?;
        let (bs, m, k) = (av.dims()[0], av.dims()[1], av.dims()[2]);
        let (bk, bn) = if trans_b {
            (bv.dims()[2], bv.dims()[1])
        } else {
            (bv.dims()[1], bv.dims()[2])
        };
        if bv.dims()[0] != bs || bk != k {
            return Err(shape_err(
                "batch_matmul",
                format!("{:?} @ {:?} (trans_b={trans_b})", av.dims(), bv.dims()),
            ));
        }
        let n = bn;
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            let a_i = &av.data()[i * m * k..(i + 1) * m * k];
            let b_i = &bv.data()[i * k * n..(i + 1) * k * n];
            let o_i = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(a_i, b_i, o_i, m, k, n);
            } else {
                gemm_nn(a_i, b_i, o_i, m, k, n);
            }
        }
        let t = Tensor::new(vec![bs, m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::BatchMatMul { a, b, trans_b }, t, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), t, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), t, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), t, ng)
    }

    /// Adds a 1-D bias to every row of `x` (trailing dimension).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.last_dim();
        if bv.dims() != [c] {
            return Err(shape_err("add_row", format!("{:?} + {:?}", xv.dims(), bv.dims())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(Op::AddRow(x, bias), out, ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(Op::Scale(x, c), t, ng)
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.last_dim();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let ng = self.ng(x);
        self.push(Op::Softmax(x), out, ng)
    }

    /// Log-softmax over the trailing dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.last_dim();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let ng = self.ng(x);
        self.push(Op::LogSoftmax(x), out, ng)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.ln());
        let ng = self.ng(x);
        self.push(Op::Ln(x), t, ng)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.exp());
        let ng = self.ng(x);
        self.push(Op::Exp(x), t, ng)
    }

    /// Scales every row (trailing dimension) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.last_dim();
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(Error::Degenerate("zero-norm row in l2_normalize".into()));
            }
            for v in row.iter_mut() {
                *v = *v / n;
            }
        }
        let ng = self.ng(x);
        self.push(Op::L2Normalize(x), out, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.dims() != [c] || bv.dims() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.dims(), gv.dims(), bv.dims()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let (mean, inv) = moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gv.data()[j] + bv.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Op::LayerNorm { x, gamma, beta, eps }, out, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| gelu_fwd(v).0);
        let ng = self.ng(x);
        self.push(Op::Gelu(x), t, ng)
    }

    /// Rows of a 2-D table selected by `ids`; embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        tv.expect_rank(2, "gather_rows")?;
        let (rows, c) = (tv.dims()[0], tv.dims()[1]);
        if ids.is_empty() {
            return Err(shape_err("gather_rows", "no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(shape_err("gather_rows", format!("id {id} >= {rows}")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), c], data)?;
        let ng = self.ng(table);
        self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            t,
            ng,
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Mean over the unmasked rows of each sequence. `x` is
    /// `[batch*seq, d]`; `mask[i]` is true for real (non-PAD) positions.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool], batch: usize, seq: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank(2, "masked_mean")?;
        let d = xv.dims()[1];
        if xv.dims()[0] != batch * seq || mask.len() != batch * seq {
            return Err(shape_err(
                "masked_mean",
                format!("x {:?}, mask {}, batch {batch}, seq {seq}", xv.dims(), mask.len()),
            ));
        }
        let mut out = vec![T::zero(); batch * d];
        for b in 0..batch {
            let count = mask[b * seq..(b + 1) * seq].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::Degenerate(format!("row {b} is entirely padding")));
            }
            let o = &mut out[b * d..(b + 1) * d];
            for t in 0..seq {
                if mask[b * seq + t] {
                    for (ov, &xv) in o.iter_mut().zip(xv.row(b * seq + t)) {
                        *ov = *ov + xv;
                    }
                }
            }
            let inv = T::one() / T::from_usize(count).unwrap();
            for ov in o.iter_mut() {
                *ov = *ov * inv;
            }
        }
        let t = Tensor::new(vec![batch, d], out)?;
        let ng = self.ng(x);
        self.push(
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                batch,
                seq,
            },
            t,
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x).slice_last(start, end)?;
        let ng = self.ng(x);
        self.push(Op::SliceCols { x, start, end }, t, ng)
    }

    /// First `k` entries of the trailing dimension.
    pub fn prefix(&mut self, x: Var, k: usize) -> Result<Var> {
        if k == self.value(x).last_dim() {
            return Ok(x);
        }
        self.slice_cols(x, 0, k)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&ts)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatRows(parts.to_vec()), t, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(Op::Sum(x), t, ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / T::from_usize(v.len()).unwrap());
        let ng = self.ng(x);
        self.push(Op::Mean(x), t, ng)
    }

    /// Identity in the forward pass, zero gradient in the backward pass.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let t = match &self.frozen {
            Some(frozen) => {
                let idx = self.detached.len();
                let t = frozen.get(idx).cloned().ok_or_else(|| {
                    Error::InvalidArgument("frozen detach replay ran out of values".into())
                })?;
                t.expect_same_dims(self.value(x), "detach")?;
                t
            }
            None => self.value(x).clone(),
        };
        self.detached.push(t.clone());
        self.push(Op::Detach, t, false)
    }

    /// `[batch*seq, heads*dh]` to `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank(2, "split_heads")?;
        let d = xv.dims()[1];
        if xv.dims()[0] != batch * seq || d % heads != 0 {
            return Err(shape_err(
                "split_heads",
                format!("{:?} with batch {batch}, seq {seq}, heads {heads}", xv.dims()),
            ));
        }
        let dh = d / heads;
        let mut out = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            for t in 0..seq {
                let src = xv.row(b * seq + t);
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let t = Tensor::new(vec![batch * heads, seq, dh], out)?;
        let ng = self.ng(x);
        self.push(
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            t,
            ng,
        )
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank(3, "merge_heads")?;
        if xv.dims()[0] != batch * heads || xv.dims()[1] != seq {
            return Err(shape_err(
                "merge_heads",
                format!("{:?} with batch {batch}, seq {seq}, heads {heads}", xv.dims()),
            ));
        }
        let dh = xv.dims()[2];
        let d = dh * heads;
        let mut out = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + t) * dh;
                    let dst = (b * seq + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let t = Tensor::new(vec![batch * seq, d], out)?;
        let ng = self.ng(x);
        self.push(
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            t,
            ng,
        )
    }

    /// Reverse pass from a scalar root. Gradient buffers are fresh for every
    /// call.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(self.value(root).dims().to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[root.0] = Some(Tensor::filled(self.value(root).dims(), T::one()));

        for i in (0..n).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(mut dy) = grads[i].take() else {
                continue;
            };
            let op = &self.ops[i];
            if self.fault == Some(op.name()) {
                dy = dy.map(|v| -v);
            }
            self.backward_op(op, i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }

        Ok(Gradients {
            grads,
            dims: self.values.iter().map(|v| v.dims().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs_grad[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_op(
        &self,
        op: &Op<T>,
        node: usize,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let y = &self.values[node];
        match op {
            Op::Param | Op::Constant | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(dy.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(av.data(), dy.data(), &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, dy.transpose2()?);
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (av.dims()[0], av.dims()[1], av.dims()[2]);
                let n = y.dims()[2];
                if self.ng(*a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        let dy_i = &dy.data()[i * m * n..(i + 1) * m * n];
                        let b_i = &bv.data()[i * k * n..(i + 1) * k * n];
                        let da_i = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // C = A B^T, B is [n,k]: dA = dC B
                            gemm_nn(dy_i, b_i, da_i, m, n, k);
                        } else {
                            gemm_nt(dy_i, b_i, da_i, m, n, k);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(av.dims().to_vec(), da)?);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        let dy_i = &dy.data()[i * m * n..(i + 1) * m * n];
                        let a_i = &av.data()[i * m * k..(i + 1) * m * k];
                        let db_i = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB = dC^T A, [n,k]
                            gemm_tn(dy_i, a_i, db_i, m, n, k);
                        } else {
                            gemm_tn(a_i, dy_i, db_i, m, k, n);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.dims().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let g = dy.zip_map(self.value(*b), "mul", |d, v| d * v)?;
                    self.accumulate(grads, *a, g);
                }
                if self.ng(*b) {
                    let g = dy.zip_map(self.value(*a), "mul", |d, v| d * v)?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, dy.clone());
                if self.ng(*bias) {
                    let c = dy.last_dim();
                    let mut db = vec![T::zero(); c];
                    for row in dy.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![c], db)?);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, dy.map(|v| v * c));
            }
            Op::Softmax(x) => {
                let c = y.last_dim();
                let mut dx = dy.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&d, &s)| d * s).sum();
                    for (d, &s) in drow.iter_mut().zip(yrow) {
                        *d = s * (*d - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let c = y.last_dim();
                let mut dx = dy.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let total: T = drow.iter().copied().sum();
                    for (d, &ls) in drow.iter_mut().zip(yrow) {
                        *d = *d - ls.exp() * total;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Ln(x) => {
                let g = dy.zip_map(self.value(*x), "ln", |d, v| d / v)?;
                self.accumulate(grads, *x, g);
            }
            Op::Exp(x) => {
                let g = dy.zip_map(y, "exp", |d, v| d * v)?;
                self.accumulate(grads, *x, g);
            }
            Op::L2Normalize(x) => {
                let xv = self.value(*x);
                let c = y.last_dim();
                let mut dx = dy.clone();
                for ((drow, yrow), xrow) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(xv.data().chunks(c))
                {
                    let n = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let dot: T = drow.iter().zip(yrow).map(|(&d, &u)| d * u).sum();
                    for (d, &u) in drow.iter_mut().zip(yrow) {
                        *d = (*d - u * dot) / n;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let c = xv.last_dim();
                let cf = T::from_usize(c).unwrap();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (r, (xrow, drow)) in xv.data().chunks(c).zip(dy.data().chunks(c)).enumerate() {
                    let (mean, inv) = moments(xrow, *eps);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * inv;
                        let dxhat = drow[j] * gv.data()[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgamma[j] = dgamma[j] + drow[j] * xhat;
                        dbeta[j] = dbeta[j] + drow[j];
                    }
                    let out = &mut dx[r * c..(r + 1) * c];
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * inv;
                        let dxhat = drow[j] * gv.data()[j];
                        out[j] = inv * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
                    }
                }
                if self.ng(*x) {
                    self.accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), dx)?);
                }
                if self.ng(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                }
                if self.ng(*beta) {
                    self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
                }
            }
            Op::Gelu(x) => {
                let g = dy.zip_map(self.value(*x), "gelu", |d, v| d * gelu_fwd(v).1)?;
                self.accumulate(grads, *x, g);
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let c = tv.dims()[1];
                let mut dt = Tensor::zeros(tv.dims());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * c..(id + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(dy.row(r)) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::MaskedMean {
                x,
                mask,
                batch,
                seq,
            } => {
                let xv = self.value(*x);
                let d = xv.dims()[1];
                let mut dx = Tensor::zeros(xv.dims());
                for b in 0..*batch {
                    let count = mask[b * seq..(b + 1) * seq].iter().filter(|&&m| m).count();
                    let inv = T::one() / T::from_usize(count).unwrap();
                    for t in 0..*seq {
                        if mask[b * seq + t] {
                            let r = b * seq + t;
                            let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
                            for (o, &g) in dst.iter_mut().zip(dy.row(b)) {
                                *o = g * inv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start, end } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let w = end - start;
                let mut dx = Tensor::zeros(xv.dims());
                for (dst, src) in dx.data_mut().chunks_mut(c).zip(dy.data().chunks(w)) {
                    dst[*start..*end].copy_from_slice(src);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let piece = Tensor::new(
                        self.value(p).dims().to_vec(),
                        dy.data()[offset..offset + n].to_vec(),
                    )?;
                    offset += n;
                    self.accumulate(grads, p, piece);
                }
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::filled(self.value(*x).dims(), dy.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = dy.item() / T::from_usize(xv.len()).unwrap();
                self.accumulate(grads, *x, Tensor::filled(xv.dims(), g));
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let d = self.value(*x).dims()[1];
                let dh = d / heads;
                let mut dx = vec![T::zero(); batch * seq * d];
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let src = ((b * heads + h) * seq + t) * dh;
                            let dst = (b * seq + t) * d + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&dy.data()[src..src + dh]);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![batch * seq, d], dx)?);
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = self.value(*x).dims()[2];
                let d = dh * heads;
                let mut dx = vec![T::zero(); batch * seq * d];
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let dst = ((b * heads + h) * seq + t) * dh;
                            let src = (b * seq + t) * d + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&dy.data()[src..src + dh]);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![batch * heads, *seq, dh], dx)?);
            }
        }
        Ok(())
    }
}

fn moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// GELU value and derivative, tanh form.
fn gelu_fwd<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}
