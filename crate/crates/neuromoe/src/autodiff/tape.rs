//! Flat-arena reverse-mode tape.
//!
//! Forward calls append nodes (value + opcode + input ids); `backward` sweeps
//! the arena in reverse id order, which is already a topological order because
//! ops can only reference earlier nodes. Adjoints of interior nodes are freed
//! as soon as they have been propagated, so peak memory during backward stays
//! close to the forward peak; leaf adjoints are retained and can be queried
//! with [`Tape::grad`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::kernels;
use crate::autodiff::matmul::{gemm, gemm_strided, MatView};
use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Index of a node on its tape.
pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    /// `a @ b` for rank-2 operands `[m,k] @ [k,n]`.
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// `alpha * a @ b^T` for `a: [m,k]`, `b: [n,k]`; used for attention
    /// scores so the 1/sqrt(d_head) scale costs nothing extra.
    MatmulNtScaled {
        a: NodeId,
        b: NodeId,
        alpha: f64,
    },
    /// `x @ w` plus a broadcast rank-1 bias, in one node.
    Linear {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
    },
    /// Fused multi-head scaled dot-product attention over `[n, d]` q/k/v,
    /// column-blocked into `heads` heads. Only the row-softmaxed score
    /// matrices are kept for the backward pass; scores and per-head outputs
    /// never materialize as nodes.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        scale: f64,
        /// `heads` row-major `[n, n]` probability blocks, concatenated.
        probs: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// Broadcast add of a rank-1 bias over the rows of a rank-2 tensor.
    AddRow {
        a: NodeId,
        bias: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    AddScalar {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Softmax {
        a: NodeId,
        axis: usize,
    },
    /// Mean over one axis, keeping it with extent 1.
    MeanAxis {
        a: NodeId,
        axis: usize,
    },
    Sum {
        a: NodeId,
    },
    /// Normalization over the last axis with learned gain/shift.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    Dropout {
        a: NodeId,
        mask: Vec<bool>,
        scale: f64,
    },
    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    Reshape {
        a: NodeId,
    },
}

struct Node {
    value: Tensor,
    adjoint: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Recorded forward computation; see module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Leaf adjoint after `backward`, if this node required gradients.
    /// Interior adjoints are freed during the sweep and return `None`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].adjoint.as_deref()
    }

    // ── Leaves ──

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf { param: None })
    }

    /// Differentiable leaf whose gradient stays on the tape.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf { param: None })
    }

    /// Bind a stored parameter onto the tape; backward adds its adjoint into
    /// the store's gradient buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(
            store.value(id).clone(),
            true,
            Op::Leaf { param: Some(id) },
        )
    }

    // ── Forward ops ──

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(Error::Shape(format!(
                "matmul requires [m,k] @ [k,n], got {:?} @ {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatView::contiguous(av.data(), m, k),
            MatView::contiguous(bv.data(), k, n),
            0.0,
            &mut out,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push_binary(value, a, b, Op::Matmul { a, b }))
    }

    /// `alpha * a @ b^T` with `a: [m,k]`, `b: [n,k]` (shared inner width).
    pub fn matmul_nt_scaled(&mut self, a: NodeId, b: NodeId, alpha: f64) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols() {
            return Err(Error::Shape(format!(
                "matmul_nt requires [m,k] @ [n,k]^T, got {:?} @ {:?}^T",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        gemm(
            alpha,
            MatView::contiguous(av.data(), m, k),
            MatView::transposed(bv.data(), n, k),
            0.0,
            &mut out,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push_binary(value, a, b, Op::MatmulNtScaled { a, b, alpha }))
    }

    /// `x @ w + bias` with `x: [m,k]`, `w: [k,n]`, `bias: [n]` broadcast over
    /// rows, recorded as a single node.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        if xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.rows() {
            return Err(Error::Shape(format!(
                "linear requires [m,k] @ [k,n], got {:?} @ {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        if bv.rank() != 1 || bv.shape()[0] != wv.cols() {
            return Err(Error::Shape(format!(
                "linear requires a [{}] bias, got {:?}",
                wv.cols(),
                bv.shape()
            )));
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm(
            1.0,
            MatView::contiguous(xv.data(), m, k),
            MatView::contiguous(wv.data(), k, n),
            1.0,
            &mut out,
        );
        let value = Tensor::matrix(m, n, out)?;
        let needs =
            self.nodes[x].needs_grad || self.nodes[w].needs_grad || self.nodes[bias].needs_grad;
        Ok(self.push(value, needs, Op::Linear { x, w, bias }))
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are `[n, d]`
    /// with `d` divisible by `heads`; head `h` attends over column block
    /// `h*d/heads .. (h+1)*d/heads` and writes its context back to the same
    /// block, which equals per-head attention followed by column
    /// concatenation. Scores are `scale * q_h @ k_h^T`, softmaxed per row.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        scale: f64,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.rank() != 2 || qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::Shape(format!(
                "attention requires q/k/v of one [n,d] shape, got {:?}, {:?}, {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (n, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention requires a head count dividing width {d}, got {heads}"
            )));
        }
        let hd = d / heads;
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * hd;
            let ph = &mut probs[h * n * n..(h + 1) * n * n];
            gemm(
                scale,
                MatView::col_block(qv.data(), n, d, off, hd),
                MatView::col_block_t(kv.data(), n, d, off, hd),
                0.0,
                ph,
            );
            kernels::softmax_rows(ph, n);
            gemm_strided(
                1.0,
                MatView::contiguous(ph, n, n),
                MatView::col_block(vv.data(), n, d, off, hd),
                0.0,
                &mut out[off..],
                d,
            );
        }
        let value = Tensor::matrix(n, d, out)?;
        let needs =
            self.nodes[q].needs_grad || self.nodes[k].needs_grad || self.nodes[v].needs_grad;
        Ok(self.push(
            value,
            needs,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise_pair(a, b, "add", |x, y| x + y)?;
        Ok(self.push_binary(value, a, b, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise_pair(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_binary(value, a, b, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise_pair(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_binary(value, a, b, Op::Mul { a, b }))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.rank() != 2 || bv.rank() != 1 || bv.shape()[0] != av.cols() {
            return Err(Error::Shape(format!(
                "add_row requires [m,n] + [n], got {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = av.cols();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % n])
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push_binary(value, a, bias, Op::AddRow { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let av = self.value(a);
        let data: Vec<f64> = av.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        let needs = self.nodes[a].needs_grad;
        self.push(value, needs, Op::Scale { a, factor })
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> NodeId {
        let av = self.value(a);
        let data: Vec<f64> = av.data().iter().map(|&x| x + offset).collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        let needs = self.nodes[a].needs_grad;
        self.push(value, needs, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data: Vec<f64> = av.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        let needs = self.nodes[a].needs_grad;
        self.push(value, needs, Op::Relu { a })
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                av.shape()
            )));
        }
        let (outer, len, inner) = split_axis(av.shape(), axis);
        let mut data = av.data().to_vec();
        if inner == 1 {
            // Contiguous rows: the dominant case (attention scores, logits).
            kernels::softmax_rows(&mut data, len);
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        max = max.max(data[base + j * inner]);
                    }
                    let mut sum = 0.0;
                    for j in 0..len {
                        let e = (data[base + j * inner] - max).exp();
                        data[base + j * inner] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        data[base + j * inner] /= sum;
                    }
                }
            }
        }
        let value = Tensor::new(av.shape(), data)?;
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(value, needs, Op::Softmax { a, axis }))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(Error::Shape(format!(
                "mean_axis axis {axis} out of range for shape {:?}",
                av.shape()
            )));
        }
        let (outer, len, inner) = split_axis(av.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += av.data()[base + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        for v in &mut out {
            *v *= inv;
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(&shape, out)?;
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(value, needs, Op::MeanAxis { a, axis }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.nodes[a].needs_grad;
        self.push(Tensor::scalar(total), needs, Op::Sum { a })
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *xv.shape().last().expect("non-empty shape");
        if gv.rank() != 1 || bv.rank() != 1 || gv.shape()[0] != d || bv.shape()[0] != d {
            return Err(Error::Shape(format!(
                "layer_norm over last axis {d} requires gamma/beta of shape [{d}], got {:?} and {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.numel() / d;
        let mut data = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let (mean, inv_std) = row_moments(row);
            for c in 0..d {
                let xhat = (row[c] - mean) * inv_std;
                data[r * d + c] = xhat * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        let needs = self.nodes[x].needs_grad
            || self.nodes[gamma].needs_grad
            || self.nodes[beta].needs_grad;
        Ok(self.push(value, needs, Op::LayerNorm { x, gamma, beta }))
    }

    /// Inverted dropout with drop probability `p`. In evaluation mode
    /// (`training == false`) or at `p == 0` this is the identity and records
    /// nothing.
    pub fn dropout(
        &mut self,
        a: NodeId,
        p: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0,1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let av = self.value(a);
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<bool> = (0..av.numel()).map(|_| rng.random::<f64>() >= p).collect();
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &keep)| if keep { x * scale } else { 0.0 })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(value, needs, Op::Dropout { a, mask, scale }))
    }

    /// Mean softmax cross-entropy over a `[batch, classes]` logit matrix.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(Error::Shape(format!(
                "cross_entropy requires [batch, classes] logits, got {:?}",
                lv.shape()
            )));
        }
        let (b, c) = (lv.rows(), lv.cols());
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "cross_entropy got {} labels for batch size {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Data(format!(
                "class label {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / b as f64);
        let needs = self.nodes[logits].needs_grad;
        Ok(self.push(
            value,
            needs,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Columns `start .. start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() != 2 || len == 0 || start + len > av.cols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of range for shape {:?}",
                start + len,
                av.shape()
            )));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&av.data()[r * n + start..r * n + start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(value, needs, Op::SliceCols { a, start }))
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero tensors".into()));
        }
        let m = self.value(parts[0]).rows();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.rows() != m {
                return Err(Error::Shape(format!(
                    "concat_cols requires rank-2 inputs with {m} rows, got {:?}",
                    pv.shape()
                )));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let pv = self.value(p);
                let n = pv.cols();
                data.extend_from_slice(&pv.data()[r * n..(r + 1) * n]);
            }
        }
        let value = Tensor::matrix(m, total, data)?;
        let needs = parts.iter().any(|&p| self.nodes[p].needs_grad);
        Ok(self.push(
            value,
            needs,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Vertical concatenation of rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero tensors".into()));
        }
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.cols() != n {
                return Err(Error::Shape(format!(
                    "concat_rows requires rank-2 inputs with {n} cols, got {:?}",
                    pv.shape()
                )));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::matrix(rows, n, data)?;
        let needs = parts.iter().any(|&p| self.nodes[p].needs_grad);
        Ok(self.push(
            value,
            needs,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// View with a new shape of equal element count.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        let value = Tensor::new(shape, av.data().to_vec())?;
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(value, needs, Op::Reshape { a }))
    }

    /// Flatten to a single row `[1, numel]`.
    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        let numel = self.value(a).numel();
        self.reshape(a, &[1, numel]).expect("same element count")
    }

    // ── Backward ──

    /// Reverse sweep from a scalar `loss`. Adjoints of `var` leaves are
    /// retained on the tape (queryable via [`Tape::grad`]); adjoints of
    /// parameter leaves are added into `store`'s gradient buffers. Calling
    /// backward twice without zeroing doubles every gradient.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if loss >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "backward from node {loss}, but tape has {} nodes",
                self.nodes.len()
            )));
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        if !self.nodes[loss].needs_grad {
            return Ok(()); // no differentiable leaf feeds the loss
        }
        {
            let buf = self.adjoint_buf(loss);
            buf[0] += 1.0;
        }
        for id in (0..=loss).rev() {
            if self.nodes[id].adjoint.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.nodes[id].adjoint.take().expect("checked above");
            let keep = self.propagate(id, &g, store)?;
            if keep {
                self.nodes[id].adjoint = Some(g);
            }
        }
        Ok(())
    }

    /// Propagate the adjoint `g` of node `id` to its inputs. Returns whether
    /// the adjoint should stay on the tape (true only for leaves).
    fn propagate(&mut self, id: NodeId, g: &[f64], store: &mut ParamStore) -> Result<bool> {
        // Ops are moved out temporarily so `self` can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Sum { a: 0 });
        match &op {
            Op::Leaf { param } => {
                // Param adjoints are flushed into the store and dropped from
                // the tape, so a second backward adds exactly one more
                // contribution; var adjoints stay queryable via `grad`.
                let keep = match param {
                    Some(pid) => {
                        store.accumulate_grad(*pid, g);
                        false
                    }
                    None => true,
                };
                self.nodes[id].op = op;
                return Ok(keep);
            }
            Op::Matmul { a, b } => {
                let (m, n) = {
                    let v = &self.nodes[id].value;
                    (v.rows(), v.cols())
                };
                let k = self.nodes[*a].value.cols();
                if self.needs(*a) {
                    let mut da = self.take_adjoint(*a);
                    let bv = self.nodes[*b].value.data();
                    gemm(
                        1.0,
                        MatView::contiguous(g, m, n),
                        MatView::transposed(bv, k, n),
                        1.0,
                        &mut da,
                    );
                    self.nodes[*a].adjoint = Some(da);
                }
                if self.needs(*b) {
                    let mut db = self.take_adjoint(*b);
                    let av = self.nodes[*a].value.data();
                    gemm(
                        1.0,
                        MatView::transposed(av, m, k),
                        MatView::contiguous(g, m, n),
                        1.0,
                        &mut db,
                    );
                    self.nodes[*b].adjoint = Some(db);
                }
            }
            Op::MatmulNtScaled { a, b, alpha } => {
                let (m, n) = {
                    let v = &self.nodes[id].value;
                    (v.rows(), v.cols())
                };
                let k = self.nodes[*a].value.cols();
                if self.needs(*a) {
                    let mut da = self.take_adjoint(*a);
                    let bv = self.nodes[*b].value.data();
                    gemm(
                        *alpha,
                        MatView::contiguous(g, m, n),
                        MatView::contiguous(bv, n, k),
                        1.0,
                        &mut da,
                    );
                    self.nodes[*a].adjoint = Some(da);
                }
                if self.needs(*b) {
                    let mut db = self.take_adjoint(*b);
                    let av = self.nodes[*a].value.data();
                    gemm(
                        *alpha,
                        MatView::transposed(g, m, n),
                        MatView::contiguous(av, m, k),
                        1.0,
                        &mut db,
                    );
                    self.nodes[*b].adjoint = Some(db);
                }
            }
            Op::Linear { x, w, bias } => {
                let (m, n) = {
                    let val = &self.nodes[id].value;
                    (val.rows(), val.cols())
                };
                let k = self.nodes[*x].value.cols();
                if self.needs(*x) {
                    let mut dx = self.take_adjoint(*x);
                    let wv = self.nodes[*w].value.data();
                    gemm(
                        1.0,
                        MatView::contiguous(g, m, n),
                        MatView::transposed(wv, k, n),
                        1.0,
                        &mut dx,
                    );
                    self.nodes[*x].adjoint = Some(dx);
                }
                if self.needs(*w) {
                    let mut dw = self.take_adjoint(*w);
                    let xv = self.nodes[*x].value.data();
                    gemm(
                        1.0,
                        MatView::transposed(xv, m, k),
                        MatView::contiguous(g, m, n),
                        1.0,
                        &mut dw,
                    );
                    self.nodes[*w].adjoint = Some(dw);
                }
                if self.needs(*bias) {
                    let mut db = self.take_adjoint(*bias);
                    for row in g.chunks_exact(n) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                    self.nodes[*bias].adjoint = Some(db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => {
                let (n, d) = {
                    let val = &self.nodes[id].value;
                    (val.rows(), val.cols())
                };
                let hd = d / heads;
                // Gradients accumulate into fresh buffers first so aliased
                // inputs (e.g. q == k) still sum correctly through the
                // ordinary per-node accumulation below.
                let mut dq = self.needs(*q).then(|| vec![0.0; n * d]);
                let mut dk = self.needs(*k).then(|| vec![0.0; n * d]);
                let mut dv = self.needs(*v).then(|| vec![0.0; n * d]);
                {
                    let qd = self.nodes[*q].value.data();
                    let kd = self.nodes[*k].value.data();
                    let vd = self.nodes[*v].value.data();
                    let mut dp = vec![0.0; n * n]; // shared scratch across heads
                    for h in 0..*heads {
                        let off = h * hd;
                        let ph = &probs[h * n * n..(h + 1) * n * n];
                        if let Some(dv) = dv.as_mut() {
                            gemm_strided(
                                1.0,
                                MatView::transposed(ph, n, n),
                                MatView::col_block(g, n, d, off, hd),
                                1.0,
                                &mut dv[off..],
                                d,
                            );
                        }
                        if dq.is_none() && dk.is_none() {
                            continue;
                        }
                        gemm(
                            1.0,
                            MatView::col_block(g, n, d, off, hd),
                            MatView::col_block_t(vd, n, d, off, hd),
                            0.0,
                            &mut dp,
                        );
                        // Softmax backward in place: dS = P ⊙ (dP − <P, dP>).
                        for (p_row, dp_row) in
                            ph.chunks_exact(n).zip(dp.chunks_exact_mut(n))
                        {
                            let dot = kernels::dot(p_row, dp_row);
                            for j in 0..n {
                                dp_row[j] = p_row[j] * (dp_row[j] - dot);
                            }
                        }
                        if let Some(dq) = dq.as_mut() {
                            gemm_strided(
                                *scale,
                                MatView::contiguous(&dp, n, n),
                                MatView::col_block(kd, n, d, off, hd),
                                1.0,
                                &mut dq[off..],
                                d,
                            );
                        }
                        if let Some(dk) = dk.as_mut() {
                            gemm_strided(
                                *scale,
                                MatView::transposed(&dp, n, n),
                                MatView::col_block(qd, n, d, off, hd),
                                1.0,
                                &mut dk[off..],
                                d,
                            );
                        }
                    }
                }
                if let Some(b) = dq {
                    self.add_into(*q, &b, |gi| gi);
                }
                if let Some(b) = dk {
                    self.add_into(*k, &b, |gi| gi);
                }
                if let Some(b) = dv {
                    self.add_into(*v, &b, |gi| gi);
                }
            }
            Op::Add { a, b } => {
                self.add_into(*a, g, |gi| gi);
                self.add_into(*b, g, |gi| gi);
            }
            Op::Sub { a, b } => {
                self.add_into(*a, g, |gi| gi);
                self.add_into(*b, g, |gi| -gi);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let mut da = self.take_adjoint(*a);
                    let bv = self.nodes[*b].value.data();
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                    self.nodes[*a].adjoint = Some(da);
                }
                if self.needs(*b) {
                    let mut db = self.take_adjoint(*b);
                    let av = self.nodes[*a].value.data();
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                    self.nodes[*b].adjoint = Some(db);
                }
            }
            Op::AddRow { a, bias } => {
                self.add_into(*a, g, |gi| gi);
                if self.needs(*bias) {
                    let n = self.nodes[*bias].value.numel();
                    let mut db = self.take_adjoint(*bias);
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                    self.nodes[*bias].adjoint = Some(db);
                }
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.add_into(*a, g, move |gi| gi * f);
            }
            Op::AddScalar { a } => {
                self.add_into(*a, g, |gi| gi);
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let mut da = self.take_adjoint(*a);
                    let av = self.nodes[*a].value.data();
                    for ((d, &gi), &ai) in da.iter_mut().zip(g).zip(av) {
                        *d += gi * f64::from(u8::from(ai > 0.0));
                    }
                    self.nodes[*a].adjoint = Some(da);
                }
            }
            Op::Softmax { a, axis } => {
                if self.needs(*a) {
                    let (outer, len, inner) = split_axis(self.nodes[id].value.shape(), *axis);
                    let mut da = self.take_adjoint(*a);
                    let s = self.nodes[id].value.data();
                    if inner == 1 {
                        for ((da_row, s_row), g_row) in da
                            .chunks_exact_mut(len)
                            .zip(s.chunks_exact(len))
                            .zip(g.chunks_exact(len))
                        {
                            let dot = kernels::dot(s_row, g_row);
                            for j in 0..len {
                                da_row[j] = s_row[j].mul_add(g_row[j] - dot, da_row[j]);
                            }
                        }
                    } else {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let mut dot = 0.0;
                                for j in 0..len {
                                    let idx = base + j * inner;
                                    dot += g[idx] * s[idx];
                                }
                                for j in 0..len {
                                    let idx = base + j * inner;
                                    da[idx] += s[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    }
                    self.nodes[*a].adjoint = Some(da);
                }
            }
            Op::MeanAxis { a, axis } => {
                if self.needs(*a) {
                    let (outer, len, inner) = split_axis(self.nodes[*a].value.shape(), *axis);
                    let inv = 1.0 / len as f64;
                    let mut da = self.take_adjoint(*a);
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in 0..inner {
                                da[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                    self.nodes[*a].adjoint = Some(da);
                }
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let g0 = g[0];
                    let mut da = self.take_adjoint(*a);
                    for d in da.iter_mut() {
                        *d += g0;
                    }
                    self.nodes[*a].adjoint = Some(da);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = *self.nodes[*x].value.shape().last().expect("non-empty");
                let rows = self.nodes[*x].value.numel() / d;
                if self.needs(*x) {
                    let mut dx = self.take_adjoint(*x);
                    let xv = self.nodes[*x].value.data();
                    let gv = self.nodes[*gamma].value.data();
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let (mean, inv_std) = row_moments(row);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv_std;
                            let dxhat = g[r * d + c] * gv[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_d = 1.0 / d as f64;
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv_std;
                            let dxhat = g[r * d + c] * gv[c];
                            dx[r * d + c] += inv_std
                                * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                    self.nodes[*x].adjoint = Some(dx);
                }
                if self.needs(*gamma) {
                    let mut dg = self.take_adjoint(*gamma);
                    let xv = self.nodes[*x].value.data();
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let (mean, inv_std) = row_moments(row);
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv_std;
                            dg[c] += g[r * d + c] * xhat;
                        }
                    }
                    self.nodes[*gamma].adjoint = Some(dg);
                }
                if self.needs(*beta) {
                    let mut db = self.take_adjoint(*beta);
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                    self.nodes[*beta].adjoint = Some(db);
                }
            }
            Op::Dropout { a, mask, scale } => {
                if self.needs(*a) {
                    let mut da = self.take_adjoint(*a);
                    for i in 0..g.len() {
                        if mask[i] {
                            da[i] += g[i] * scale;
                        }
                    }
                    self.nodes[*a].adjoint = Some(da);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let lv = self.nodes[*logits].value.clone();
                    let (b, c) = (lv.rows(), lv.cols());
                    let mut dl = self.take_adjoint(*logits);
                    let g0 = g[0] / b as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &lv.data()[r * c..(r + 1) * c];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - max).exp() / sum;
                            let indicator = if j == y { 1.0 } else { 0.0 };
                            dl[r * c + j] += g0 * (p - indicator);
                        }
                    }
                    self.nodes[*logits].adjoint = Some(dl);
                }
            }
            Op::SliceCols { a, start } => {
                if self.needs(*a) {
                    let n = self.nodes[*a].value.cols();
                    let len = self.nodes[id].value.cols();
                    let m = self.nodes[id].value.rows();
                    let mut da = self.take_adjoint(*a);
                    for r in 0..m {
                        for c in 0..len {
                            da[r * n + start + c] += g[r * len + c];
                        }
                    }
                    self.nodes[*a].adjoint = Some(da);
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[id].value.rows();
                let total = self.nodes[id].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.cols();
                    if self.needs(p) {
                        let mut dp = self.take_adjoint(p);
                        for r in 0..m {
                            for c in 0..n {
                                dp[r * n + c] += g[r * total + offset + c];
                            }
                        }
                        self.nodes[p].adjoint = Some(dp);
                    }
                    offset += n;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.nodes[p].value.numel();
                    if self.needs(p) {
                        let mut dp = self.take_adjoint(p);
                        for i in 0..numel {
                            dp[i] += g[offset + i];
                        }
                        self.nodes[p].adjoint = Some(dp);
                    }
                    offset += numel;
                }
            }
            Op::Reshape { a } => {
                self.add_into(*a, g, |gi| gi);
            }
        }
        self.nodes[id].op = op;
        Ok(false)
    }

    // ── Internals ──

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            adjoint: None,
            needs_grad,
            op,
        });
        id
    }

    fn push_binary(&mut self, value: Tensor, a: NodeId, b: NodeId, op: Op) -> NodeId {
        let needs = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(value, needs, op)
    }

    fn elementwise_pair(
        &self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "{what} requires matching shapes, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn adjoint_buf(&mut self, id: NodeId) -> &mut Vec<f64> {
        let numel = self.nodes[id].value.numel();
        self.nodes[id]
            .adjoint
            .get_or_insert_with(|| vec![0.0; numel])
    }

    fn take_adjoint(&mut self, id: NodeId) -> Vec<f64> {
        let numel = self.nodes[id].value.numel();
        self.nodes[id]
            .adjoint
            .take()
            .unwrap_or_else(|| vec![0.0; numel])
    }

    /// Elementwise pass-through accumulation `d[i] += f(g[i])` into node `a`,
    /// for ops whose input and output have equal element counts.
    fn add_into(&mut self, a: NodeId, g: &[f64], f: impl Fn(f64) -> f64) {
        if !self.needs(a) {
            return;
        }
        let mut da = self.take_adjoint(a);
        debug_assert_eq!(da.len(), g.len());
        for (d, &gi) in da.iter_mut().zip(g) {
            *d += f(gi);
        }
        self.nodes[a].adjoint = Some(da);
    }
}

/// Decompose `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Mean and inverse standard deviation (population, epsilon-stabilized) of a
/// row, as used by layer normalization.
fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = kernels::sum(row) / d;
    let var = kernels::centered_sumsq(row, mean) / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}
