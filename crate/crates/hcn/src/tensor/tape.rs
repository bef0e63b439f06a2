//! Define-by-run gradient tape.
//!
//! A tape is rebuilt for every forward pass. Nodes are appended in execution
//! order, so inputs always precede the operations that consume them and a
//! single reverse sweep visits each node exactly once.

use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::params::{ParamId, ParamSet};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

enum Op {
    /// Untracked input (labels, fixed features).
    Const,
    /// Tracked input that is not a parameter (gradient checking).
    Leaf,
    /// Full parameter tensor.
    Param { pid: ParamId },
    /// Rows gathered from an embedding table. With `pad_zero`, index 0 maps
    /// to the zero vector and receives no gradient.
    EmbedRows {
        pid: ParamId,
        indices: Vec<u32>,
        pad_zero: bool,
    },
    MatMul { a: VarId, b: VarId },
    /// a · bᵀ.
    MatMulNt { a: VarId, b: VarId },
    Transpose { a: VarId },
    Add { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { a: VarId, c: f64 },
    /// Bias row broadcast over the rows of `x`.
    AddBias { x: VarId, b: VarId },
    ConcatCols { parts: Vec<VarId> },
    ConcatRows { parts: Vec<VarId> },
    SliceCols { a: VarId, from: usize, to: usize },
    SoftmaxRows { a: VarId },
    /// Row softmax over a column subset; masked entries are zero in the
    /// output, which is all the backward rule needs.
    MaskedSoftmaxRows { a: VarId },
    Relu { a: VarId },
    SumAll { a: VarId },
    /// Mean over the valid rows; no valid rows yields the zero vector.
    MaskedMeanRows { a: VarId, valid: Vec<bool> },
    TileRows { a: VarId, copies: usize },
    /// Mean binary cross-entropy on logits, fused log-sum-exp form.
    SigmoidBce { logits: VarId, labels: Vec<f64> },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

impl Node {
    fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// Gradient tape. See module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_memo: Vec<(ParamId, VarId)>,
    /// Shape (rows, cols) of every attention score matrix recorded this
    /// pass; the complexity instrument for the n·ℓ claim.
    pub attn_score_shapes: Vec<(usize, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool, op: Op) -> VarId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            needs_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: VarId) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: VarId) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: VarId) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: VarId) -> Result<f64, TensorError> {
        let n = &self.nodes[v.0];
        if n.rows != 1 || n.cols != 1 {
            return Err(TensorError::NotScalar {
                op: "scalar",
                rows: n.rows,
                cols: n.cols,
            });
        }
        Ok(n.data[0])
    }

    pub fn value_tensor(&self, v: VarId) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.data.clone()).expect("node shape consistent")
    }

    // ── Inputs ───────────────────────────────────────────────────────

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> VarId {
        self.push(rows, cols, data, false, Op::Const)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Result<VarId, TensorError> {
        let (r, c) = t.dims2()?;
        Ok(self.constant(r, c, t.data().to_vec()))
    }

    /// Gradient-tracked input that is not a parameter.
    pub fn leaf(&mut self, t: &Tensor) -> Result<VarId, TensorError> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data().to_vec(), true, Op::Leaf))
    }

    /// Parameter leaf; repeat calls for the same parameter share one node.
    pub fn param(&mut self, params: &ParamSet, pid: ParamId) -> VarId {
        if let Some(&(_, v)) = self.param_memo.iter().find(|(p, _)| *p == pid) {
            return v;
        }
        let t = params.tensor(pid);
        let (r, c) = t.dims2().expect("parameters are rank <= 2");
        let v = self.push(r, c, t.data().to_vec(), true, Op::Param { pid });
        self.param_memo.push((pid, v));
        v
    }

    /// Gather rows of an embedding table. With `pad_zero`, index 0 yields a
    /// zero row and the table row receives no gradient.
    pub fn embed(
        &mut self,
        params: &ParamSet,
        pid: ParamId,
        indices: &[u32],
        pad_zero: bool,
    ) -> Result<VarId, TensorError> {
        let t = params.tensor(pid);
        let (rows, cols) = t.dims2()?;
        let mut data = vec![0.0; indices.len() * cols];
        for (i, &idx) in indices.iter().enumerate() {
            let idx = idx as usize;
            if idx >= rows {
                return Err(TensorError::IndexOutOfRange { index: idx, rows });
            }
            if pad_zero && idx == 0 {
                continue;
            }
            data[i * cols..(i + 1) * cols].copy_from_slice(&t.data()[idx * cols..(idx + 1) * cols]);
        }
        Ok(self.push(
            indices.len(),
            cols,
            data,
            true,
            Op::EmbedRows {
                pid,
                indices: indices.to_vec(),
                pad_zero,
            },
        ))
    }

    // ── Operations ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, p) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, p),
            });
        }
        let mut data = vec![0.0; m * p];
        matmul_acc(&mut data, self.value(a), self.value(b), m, k, p);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, p, data, ng, Op::MatMul { a, b }))
    }

    /// a (m×k) · bᵀ where b is p×k.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (m, k) = self.shape(a);
        let (p, k2) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: (m, k),
                rhs: (p, k2),
            });
        }
        let mut data = vec![0.0; m * p];
        matmul_nt_acc(&mut data, self.value(a), self.value(b), m, k, p);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, p, data, ng, Op::MatMulNt { a, b }))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(a);
        self.push(c, r, data, ng, Op::Transpose { a })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(sa.0, sa.1, data, ng, Op::Add { a, b }))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(sa.0, sa.1, data, ng, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let (r, w) = self.shape(a);
        let data = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.needs(a);
        self.push(r, w, data, ng, Op::Scale { a, c })
    }

    /// x (m×p) plus a 1×p bias row broadcast over rows. The only broadcast
    /// the engine supports.
    pub fn add_bias(&mut self, x: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (m, p) = self.shape(x);
        let sb = self.shape(b);
        if sb != (1, p) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: (m, p),
                rhs: sb,
            });
        }
        let bias = self.value(b).to_vec();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(p) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(m, p, data, ng, Op::AddBias { x, b }))
    }

    /// x·W + b.
    pub fn affine(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Column-wise concatenation; all parts share the leading dimension.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let (m, _) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]),
                    rhs: (r, c),
                });
            }
            total += c;
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            let src = self.value(p);
            for i in 0..m {
                data[i * total + off..i * total + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(m, total, data, ng, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Row-wise stacking; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_rows" });
        }
        let (_, cols) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]),
                    rhs: (r, c),
                });
            }
            total += r;
        }
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(total, cols, data, ng, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, a: VarId, from: usize, to: usize) -> Result<VarId, TensorError> {
        let (r, c) = self.shape(a);
        if from >= to || to > c {
            return Err(TensorError::BadColumnRange {
                op: "slice_cols",
                from,
                to,
                cols: c,
            });
        }
        let w = to - from;
        let src = self.value(a);
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * c + from..i * c + to]);
        }
        let ng = self.needs(a);
        Ok(self.push(r, w, data, ng, Op::SliceCols { a, from, to }))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let (r, c) = self.shape(a);
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(c) {
            softmax_row_inplace(row);
        }
        let ng = self.needs(a);
        self.push(r, c, data, ng, Op::SoftmaxRows { a })
    }

    /// Row softmax restricted to the columns marked valid. Invalid columns
    /// get weight 0; a row with no valid columns becomes all zeros.
    pub fn masked_softmax_rows(&mut self, a: VarId, valid: &[bool]) -> Result<VarId, TensorError> {
        let (r, c) = self.shape(a);
        if valid.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax_rows",
                lhs: (r, c),
                rhs: (1, valid.len()),
            });
        }
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(c) {
            masked_softmax_row_inplace(row, valid);
        }
        let ng = self.needs(a);
        Ok(self.push(r, c, data, ng, Op::MaskedSoftmaxRows { a }))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let (r, c) = self.shape(a);
        let data = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(r, c, data, ng, Op::Relu { a })
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s], ng, Op::SumAll { a })
    }

    /// Mean of the valid rows, 1×cols. No valid rows yields the zero vector.
    pub fn masked_mean_rows(&mut self, a: VarId, valid: &[bool]) -> Result<VarId, TensorError> {
        let (r, c) = self.shape(a);
        if valid.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mean_rows",
                lhs: (r, c),
                rhs: (valid.len(), 1),
            });
        }
        let src = self.value(a);
        let count = valid.iter().filter(|&&v| v).count();
        let mut data = vec![0.0; c];
        if count > 0 {
            for (i, &v) in valid.iter().enumerate() {
                if v {
                    for (acc, x) in data.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                        *acc += x;
                    }
                }
            }
            let inv = 1.0 / count as f64;
            data.iter_mut().for_each(|x| *x *= inv);
        }
        let ng = self.needs(a);
        Ok(self.push(
            1,
            c,
            data,
            ng,
            Op::MaskedMeanRows {
                a,
                valid: valid.to_vec(),
            },
        ))
    }

    /// Repeat a 1×c row `copies` times.
    pub fn tile_rows(&mut self, a: VarId, copies: usize) -> Result<VarId, TensorError> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "tile_rows",
                lhs: (r, c),
                rhs: (1, c),
            });
        }
        let row = self.value(a).to_vec();
        let mut data = Vec::with_capacity(copies * c);
        for _ in 0..copies {
            data.extend_from_slice(&row);
        }
        let ng = self.needs(a);
        Ok(self.push(copies, c, data, ng, Op::TileRows { a, copies }))
    }

    /// Mean binary cross-entropy between logits (m×1) and labels in {0,1},
    /// computed as max(y,0) − y·ŷ + ln(1+e^(−|y|)) per sample.
    pub fn sigmoid_bce(&mut self, logits: VarId, labels: &[f64]) -> Result<VarId, TensorError> {
        let (m, c) = self.shape(logits);
        if c != 1 || m != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "sigmoid_bce",
                lhs: (m, c),
                rhs: (labels.len(), 1),
            });
        }
        for &l in labels {
            if l != 0.0 && l != 1.0 {
                return Err(TensorError::NonBinaryLabel(l));
            }
        }
        let mut total = 0.0;
        for (&y, &t) in self.value(logits).iter().zip(labels) {
            total += y.max(0.0) - y * t + (-y.abs()).exp().ln_1p();
        }
        let loss = total / m as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            ng,
            Op::SigmoidBce {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. After this, every tracked node
    /// holds ∂loss/∂node; call [`Tape::accumulate_param_grads`] to push
    /// parameter gradients back into a [`ParamSet`].
    pub fn backward(&mut self, loss: VarId) -> Result<(), TensorError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NotScalar {
                op: "backward",
                rows: r,
                cols: c,
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (inputs, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.is_none() || !node.needs_grad {
                continue;
            }
            let g = node.grad.as_deref().expect("checked above");
            match &node.op {
                Op::Const | Op::Leaf | Op::Param { .. } | Op::EmbedRows { .. } => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (inputs[a.0].rows, inputs[a.0].cols);
                    let p = inputs[b.0].cols;
                    if inputs[a.0].needs_grad {
                        let bdata = inputs[b.0].data.clone();
                        let da = grad_slot(&mut inputs[a.0]);
                        matmul_nt_acc(da, g, &bdata, m, p, k);
                    }
                    if inputs[b.0].needs_grad {
                        let adata = inputs[a.0].data.clone();
                        let db = grad_slot(&mut inputs[b.0]);
                        matmul_tn_acc(db, &adata, g, m, k, p);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (m, k) = (inputs[a.0].rows, inputs[a.0].cols);
                    let p = inputs[b.0].rows;
                    if inputs[a.0].needs_grad {
                        let bdata = inputs[b.0].data.clone();
                        let da = grad_slot(&mut inputs[a.0]);
                        matmul_acc(da, g, &bdata, m, p, k);
                    }
                    if inputs[b.0].needs_grad {
                        let adata = inputs[a.0].data.clone();
                        let db = grad_slot(&mut inputs[b.0]);
                        matmul_tn_acc(db, g, &adata, m, p, k);
                    }
                }
                Op::Transpose { a } => {
                    if inputs[a.0].needs_grad {
                        let (r_out, c_out) = (node.rows, node.cols);
                        let da = grad_slot(&mut inputs[a.0]);
                        for i2 in 0..r_out {
                            for j2 in 0..c_out {
                                da[j2 * r_out + i2] += g[i2 * c_out + j2];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &v in [a, b].iter() {
                        if inputs[v.0].needs_grad {
                            let dv = grad_slot(&mut inputs[v.0]);
                            for (d, gv) in dv.iter_mut().zip(g) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if inputs[a.0].needs_grad {
                        let bdata = inputs[b.0].data.clone();
                        let da = grad_slot(&mut inputs[a.0]);
                        for ((d, gv), bv) in da.iter_mut().zip(g).zip(&bdata) {
                            *d += gv * bv;
                        }
                    }
                    if inputs[b.0].needs_grad {
                        let adata = inputs[a.0].data.clone();
                        let db = grad_slot(&mut inputs[b.0]);
                        for ((d, gv), av) in db.iter_mut().zip(g).zip(&adata) {
                            *d += gv * av;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    if inputs[a.0].needs_grad {
                        let c = *c;
                        let da = grad_slot(&mut inputs[a.0]);
                        for (d, gv) in da.iter_mut().zip(g) {
                            *d += gv * c;
                        }
                    }
                }
                Op::AddBias { x, b } => {
                    let p = node.cols;
                    if inputs[x.0].needs_grad {
                        let dx = grad_slot(&mut inputs[x.0]);
                        for (d, gv) in dx.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                    if inputs[b.0].needs_grad {
                        let db = grad_slot(&mut inputs[b.0]);
                        for row in g.chunks(p) {
                            for (d, gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let m = node.rows;
                    let total = node.cols;
                    let mut off = 0;
                    for &p in parts {
                        let c_p = inputs[p.0].cols;
                        if inputs[p.0].needs_grad {
                            let dp = grad_slot(&mut inputs[p.0]);
                            for i2 in 0..m {
                                for j2 in 0..c_p {
                                    dp[i2 * c_p + j2] += g[i2 * total + off + j2];
                                }
                            }
                        }
                        off += c_p;
                    }
                }
                Op::ConcatRows { parts } => {
                    let cols = node.cols;
                    let mut off = 0;
                    for &p in parts {
                        let r_p = inputs[p.0].rows;
                        if inputs[p.0].needs_grad {
                            let dp = grad_slot(&mut inputs[p.0]);
                            for (d, gv) in dp.iter_mut().zip(&g[off * cols..(off + r_p) * cols]) {
                                *d += gv;
                            }
                        }
                        off += r_p;
                    }
                }
                Op::SliceCols { a, from, to } => {
                    if inputs[a.0].needs_grad {
                        let (from, to) = (*from, *to);
                        let w = to - from;
                        let c_a = inputs[a.0].cols;
                        let da = grad_slot(&mut inputs[a.0]);
                        for i2 in 0..node.rows {
                            for j2 in 0..w {
                                da[i2 * c_a + from + j2] += g[i2 * w + j2];
                            }
                        }
                    }
                }
                Op::SoftmaxRows { a } | Op::MaskedSoftmaxRows { a } => {
                    // ds_i = s_i (g_i − Σ_j g_j s_j); masked entries have
                    // s = 0 and therefore zero gradient automatically.
                    if inputs[a.0].needs_grad {
                        let c2 = node.cols;
                        let s = node.data.clone();
                        let da = grad_slot(&mut inputs[a.0]);
                        for (row, (srow, grow)) in s.chunks(c2).zip(g.chunks(c2)).enumerate() {
                            let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                            for j2 in 0..c2 {
                                da[row * c2 + j2] += srow[j2] * (grow[j2] - dot);
                            }
                        }
                    }
                }
                Op::Relu { a } => {
                    if inputs[a.0].needs_grad {
                        let x = inputs[a.0].data.clone();
                        let da = grad_slot(&mut inputs[a.0]);
                        for ((d, gv), xv) in da.iter_mut().zip(g).zip(&x) {
                            if *xv > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::SumAll { a } => {
                    if inputs[a.0].needs_grad {
                        let gv = g[0];
                        let da = grad_slot(&mut inputs[a.0]);
                        da.iter_mut().for_each(|d| *d += gv);
                    }
                }
                Op::MaskedMeanRows { a, valid } => {
                    if inputs[a.0].needs_grad {
                        let count = valid.iter().filter(|&&v| v).count();
                        if count > 0 {
                            let valid = valid.clone();
                            let c2 = node.cols;
                            let inv = 1.0 / count as f64;
                            let da = grad_slot(&mut inputs[a.0]);
                            for (i2, &v) in valid.iter().enumerate() {
                                if v {
                                    for j2 in 0..c2 {
                                        da[i2 * c2 + j2] += g[j2] * inv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::TileRows { a, copies } => {
                    if inputs[a.0].needs_grad {
                        let c2 = node.cols;
                        let copies = *copies;
                        let da = grad_slot(&mut inputs[a.0]);
                        for r2 in 0..copies {
                            for j2 in 0..c2 {
                                da[j2] += g[r2 * c2 + j2];
                            }
                        }
                    }
                }
                Op::SigmoidBce { logits, labels } => {
                    if inputs[logits.0].needs_grad {
                        let m = labels.len() as f64;
                        let gv = g[0];
                        let y = inputs[logits.0].data.clone();
                        let labels = labels.clone();
                        let dy = grad_slot(&mut inputs[logits.0]);
                        for ((d, &yv), &t) in dy.iter_mut().zip(&y).zip(&labels) {
                            *d += gv * (stable_sigmoid(yv) - t) / m;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Add this tape's parameter gradients into `params` (dense leaves in
    /// full, embedding lookups row by row).
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for node in &self.nodes {
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            match &node.op {
                Op::Param { pid } => {
                    if let Some(dst) = params.tensor_mut(*pid).grad_mut() {
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
                Op::EmbedRows {
                    pid,
                    indices,
                    pad_zero,
                } => {
                    let cols = node.cols;
                    if let Some(dst) = params.tensor_mut(*pid).grad_mut() {
                        for (i, &idx) in indices.iter().enumerate() {
                            let idx = idx as usize;
                            if *pad_zero && idx == 0 {
                                continue;
                            }
                            for j in 0..cols {
                                dst[idx * cols + j] += g[i * cols + j];
                            }
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

fn grad_slot(node: &mut Node) -> &mut [f64] {
    let n = node.numel();
    node.grad.get_or_insert_with(|| vec![0.0; n])
}

fn stable_sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row.
fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn masked_softmax_row_inplace(row: &mut [f64], valid: &[bool]) {
    let mut max = f64::NEG_INFINITY;
    for (v, &ok) in row.iter().zip(valid) {
        if ok && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (v, &ok) in row.iter_mut().zip(valid) {
        if ok {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let a = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let c = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut t = Tape::new();
        let a = t.constant(1, 2, vec![1.0, 2.0]);
        let b = t.constant(2, 1, vec![3.0, 4.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, vec![0.0; 6]);
        let b = t.constant(2, 2, vec![0.0; 4]);
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: (2, 3),
                rhs: (2, 2)
            }
        );
    }

    #[test]
    fn softmax_uniform_row() {
        let mut t = Tape::new();
        let x = t.constant(1, 3, vec![1.0, 1.0, 1.0]);
        let s = t.softmax_rows(x);
        assert!(close(t.value(s), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut t = Tape::new();
        let x = t.constant(1, 3, vec![1000.0, 0.0, 0.0]);
        let s = t.softmax_rows(x);
        let v = t.value(s);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(close(v, &[1.0, 0.0, 0.0], 1e-9));
    }

    #[test]
    fn softmax_hand_value() {
        // softmax([0, ln 3]) = [1/4, 3/4].
        let mut t = Tape::new();
        let x = t.constant(1, 2, vec![0.0, 3.0f64.ln()]);
        let s = t.softmax_rows(x);
        assert!(close(t.value(s), &[0.25, 0.75], 1e-12));
    }

    #[test]
    fn masked_softmax_matches_subvector_softmax() {
        // 2 valid of 5 positions: invalid weights are 0, valid ones match
        // the softmax of the 2-element subvector.
        let mut t = Tape::new();
        let x = t.constant(1, 5, vec![0.3, -1.0, 2.0, 0.5, 9.0]);
        let valid = [true, false, true, false, false];
        let s = t.masked_softmax_rows(x, &valid).unwrap();
        let sub = t.constant(1, 2, vec![0.3, 2.0]);
        let s_sub = t.softmax_rows(sub);
        let v = t.value(s).to_vec();
        let vs = t.value(s_sub);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert_eq!(v[4], 0.0);
        assert!(close(&[v[0], v[2]], vs, 1e-12));
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_all_masked_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let s = t.masked_softmax_rows(x, &[false, false, false]).unwrap();
        assert_eq!(t.value(s), &[0.0; 6]);
    }

    #[test]
    fn concat_cols_single_part_is_identity() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = t.concat_cols(&[a]).unwrap();
        assert_eq!(t.value(c), t.value(a));
    }

    #[test]
    fn concat_cols_by_definition() {
        let mut t = Tape::new();
        let a = t.constant(2, 1, vec![1.0, 2.0]);
        let b = t.constant(2, 1, vec![3.0, 4.0]);
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(c), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(t.shape(c), (2, 2));
    }

    #[test]
    fn concat_cols_leading_dim_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(2, 1, vec![1.0, 2.0]);
        let b = t.constant(3, 1, vec![3.0, 4.0, 5.0]);
        assert!(matches!(
            t.concat_cols(&[a, b]),
            Err(TensorError::ShapeMismatch { op: "concat_cols", .. })
        ));
    }

    #[test]
    fn affine_identity() {
        let mut t = Tape::new();
        let x = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let w = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = t.constant(1, 2, vec![0.0, 0.0]);
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn affine_hand_arithmetic() {
        // [1,1]·[[2],[3]] + [1] = [6].
        let mut t = Tape::new();
        let x = t.constant(1, 2, vec![1.0, 1.0]);
        let w = t.constant(2, 1, vec![2.0, 3.0]);
        let b = t.constant(1, 1, vec![1.0]);
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y), &[6.0]);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2_for_both_labels() {
        for label in [0.0, 1.0] {
            let mut t = Tape::new();
            let y = t.constant(1, 1, vec![0.0]);
            let loss = t.sigmoid_bce(y, &[label]).unwrap();
            assert!((t.scalar(loss).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_fused_form_is_stable_and_matches_naive() {
        // Large negative logit with label 0: loss ≈ e^y, tiny but finite.
        let mut t = Tape::new();
        let y = t.constant(1, 1, vec![-50.0]);
        let loss = t.sigmoid_bce(y, &[0.0]).unwrap();
        let v = t.scalar(loss).unwrap();
        assert!(v.is_finite() && v > 0.0 && v < 1e-20, "loss = {v}");

        // At moderate logits the fused form agrees with the textbook one.
        for &(y0, label) in &[(1.7, 1.0), (-2.3, 0.0), (0.4, 0.0), (-0.9, 1.0)] {
            let mut t = Tape::new();
            let y = t.constant(1, 1, vec![y0]);
            let loss = t.sigmoid_bce(y, &[label]).unwrap();
            let sig = 1.0 / (1.0 + (-y0 as f64).exp());
            let naive = -label * sig.ln() - (1.0 - label) * (1.0 - sig).ln();
            assert!((t.scalar(loss).unwrap() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let mut t = Tape::new();
        let y = t.constant(1, 1, vec![0.0]);
        assert_eq!(
            t.sigmoid_bce(y, &[0.5]).unwrap_err(),
            TensorError::NonBinaryLabel(0.5)
        );
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut t = Tape::new();
        let w = t.leaf(&x).unwrap();
        let loss = t.sum_all(w);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2w() {
        let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut t = Tape::new();
        let w = t.leaf(&x).unwrap();
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert!(close(t.grad(w).unwrap(), &want, 1e-12));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.constant(2, 2, vec![0.0; 4]);
        assert!(matches!(
            t.backward(x),
            Err(TensorError::NotScalar { op: "backward", .. })
        ));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(loss1 + loss2) == grad(loss1) + grad(loss2).
        let x = Tensor::matrix(2, 3, vec![0.4, -0.8, 1.2, 0.0, 2.5, -1.7]).unwrap();

        let grad_of = |combine: &dyn Fn(&mut Tape, VarId) -> VarId| -> Vec<f64> {
            let mut t = Tape::new();
            let w = t.leaf(&x).unwrap();
            let loss = combine(&mut t, w);
            t.backward(loss).unwrap();
            t.grad(w).unwrap().to_vec()
        };

        let g1 = grad_of(&|t, w| t.sum_all(w));
        let g2 = grad_of(&|t, w| {
            let sq = t.mul(w, w).unwrap();
            t.sum_all(sq)
        });
        let g12 = grad_of(&|t, w| {
            let l1 = t.sum_all(w);
            let sq = t.mul(w, w).unwrap();
            let l2 = t.sum_all(sq);
            t.add(l1, l2).unwrap()
        });
        for i in 0..g1.len() {
            assert!((g12[i] - (g1[i] + g2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn embed_pads_to_zero_and_skips_pad_gradient() {
        let mut ps = ParamSet::new();
        let table = ps
            .add(
                "emb",
                Tensor::matrix(3, 2, vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap(),
            )
            .unwrap();
        let mut t = Tape::new();
        let rows = t.embed(&ps, table, &[0, 2, 1], true).unwrap();
        assert_eq!(t.value(rows), &[0.0, 0.0, 3.0, 4.0, 1.0, 2.0]);

        let loss = t.sum_all(rows);
        t.backward(loss).unwrap();
        t.accumulate_param_grads(&mut ps);
        // Row 0 is padding: no gradient despite its nonzero stored values.
        assert_eq!(
            ps.tensor(table).grad().unwrap(),
            &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let mut ps = ParamSet::new();
        let table = ps.add("emb", Tensor::zeros(3, 2)).unwrap();
        let mut t = Tape::new();
        assert_eq!(
            t.embed(&ps, table, &[3], false).unwrap_err(),
            TensorError::IndexOutOfRange { index: 3, rows: 3 }
        );
    }

    #[test]
    fn param_leaves_are_shared_within_a_tape() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        let mut t = Tape::new();
        let a = t.param(&ps, w);
        let b = t.param(&ps, w);
        assert_eq!(a, b);
        // loss = w·w through the shared leaf: grad = 2w = 4.
        let prod = t.mul(a, b).unwrap();
        let loss = t.sum_all(prod);
        t.backward(loss).unwrap();
        t.accumulate_param_grads(&mut ps);
        assert_eq!(ps.tensor(w).grad().unwrap(), &[4.0]);
    }

    #[test]
    fn forward_backward_bitwise_deterministic() {
        let run = || {
            let x = Tensor::matrix(3, 3, vec![0.1, -0.5, 0.7, 1.1, 0.2, -0.9, 0.0, 0.3, 0.8])
                .unwrap();
            let mut t = Tape::new();
            let w = t.leaf(&x).unwrap();
            let s = t.softmax_rows(w);
            let prod = t.matmul(s, w).unwrap();
            let loss = t.sum_all(prod);
            t.backward(loss).unwrap();
            (t.scalar(loss).unwrap(), t.grad(w).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
