//! Reverse-mode differentiation over a primitive tape.
//!
//! Every forward primitive appends one node to the [`Tape`]; node ids are
//! append-order indices, so the tape is topologically ordered by
//! construction and [`Tape::backward`] is a single reverse sweep that
//! visits each node exactly once. Gradient buffers start at `+0.0` and are
//! only ever accumulated into, so leaves the loss cannot reach keep a
//! bitwise-zero gradient.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive application to record on the tape.
///
/// Variants carry the per-application attributes (row sets, indices,
/// scalar factors) that the backward rule needs; tensor inputs are passed
/// separately to [`Tape::apply`].
#[derive(Clone, Debug)]
pub enum Prim {
    /// (m,k) x (k,n) -> (m,n)
    MatMul,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Elementwise product of two same-shape tensors.
    Mul,
    /// (q*r, c) + (r, c): row j of the left gets row `j % r` of the right.
    BroadcastAdd,
    Relu,
    Sigmoid,
    /// Softmax over the last axis, max-subtracted.
    Softmax,
    /// Layer norm over the last axis with learned gain and bias (rank-1, len = last axis).
    LayerNorm,
    /// Concatenation over the last axis; inputs share the row count.
    Concat,
    /// Concatenation over the row axis; inputs share the column count.
    ConcatRows,
    /// Rows `[start, start+len)` of a rank-2 tensor.
    SliceRows { start: usize, len: usize },
    /// Output row g is the mean of the input rows listed in `sel[g]`.
    MeanRows { sel: Vec<Vec<usize>> },
    /// Output row j is row `idx[j]` of the input table.
    GatherRows { idx: Vec<usize> },
    /// Sum of all entries, as a shape-[1] scalar.
    Sum,
    ScalarMul(f64),
    AddScalar(f64),
    /// Natural log, elementwise.
    Log,
    /// Clamp to [lo, hi]; gradient is zero where the clamp binds.
    Clamp { lo: f64, hi: f64 },
    /// Parameter-free head shuffle over a token-major (tokens*batch, d) matrix:
    /// output token h is the concatenation over input tokens t of segment h of
    /// token t. Requires d divisible by `tokens`. Applying it twice is the identity.
    MixTokens { tokens: usize },
    /// (r, c) scaled per row by a (r, 1) column.
    ScaleRows,
    /// Scaled dot-product attention scores between token-major query and key
    /// stacks: q (n_q*batch, d), k (n_k*batch, d) -> ((batch*heads)*n_q, n_k),
    /// scaled by 1/sqrt(d/heads). Row layout: ((i*heads + h)*n_q + a).
    AttnScores {
        heads: usize,
        n_q: usize,
        n_k: usize,
        batch: usize,
    },
    /// Attention-weighted value mix: weights ((batch*heads)*n_q, n_k) and
    /// v (n_k*batch, d) -> (n_q*batch, d), heads re-interleaved along d.
    AttnMix {
        heads: usize,
        n_q: usize,
        n_k: usize,
        batch: usize,
    },
}

impl Prim {
    pub fn name(&self) -> &'static str {
        match self {
            Prim::MatMul => "matmul",
            Prim::Add => "add",
            Prim::Mul => "mul",
            Prim::BroadcastAdd => "broadcast_add",
            Prim::Relu => "relu",
            Prim::Sigmoid => "sigmoid",
            Prim::Softmax => "softmax",
            Prim::LayerNorm => "layer_norm",
            Prim::Concat => "concat",
            Prim::ConcatRows => "concat_rows",
            Prim::SliceRows { .. } => "slice_rows",
            Prim::MeanRows { .. } => "mean_rows",
            Prim::GatherRows { .. } => "gather_rows",
            Prim::Sum => "sum",
            Prim::ScalarMul(_) => "scalar_mul",
            Prim::AddScalar(_) => "add_scalar",
            Prim::Log => "log",
            Prim::Clamp { .. } => "clamp",
            Prim::MixTokens { .. } => "mix_tokens",
            Prim::ScaleRows => "scale_rows",
            Prim::AttnScores { .. } => "attn_scores",
            Prim::AttnMix { .. } => "attn_mix",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Prim::MatMul
            | Prim::Add
            | Prim::Mul
            | Prim::BroadcastAdd
            | Prim::ScaleRows
            | Prim::AttnScores { .. }
            | Prim::AttnMix { .. } => 2,
            Prim::LayerNorm => 3,
            Prim::Concat | Prim::ConcatRows => usize::MAX, // variadic, >= 1
            _ => 1,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    Applied { prim: Prim, inputs: Vec<NodeId> },
}

/// Gradients of a scalar loss with respect to every tape node.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.grads[id.0], Tensor::scalar(0.0))
    }
}

/// An append-only record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(prim: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        prim,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn shape_err1(prim: &'static str, t: &Tensor) -> Error {
    Error::ShapeMismatch {
        prim,
        lhs: t.shape().to_vec(),
        rhs: vec![],
    }
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

    /// Inserts an input tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Records one primitive application and returns the output node.
    pub fn apply(&mut self, prim: Prim, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = prim.arity();
        if arity != usize::MAX && inputs.len() != arity {
            return Err(Error::Arity {
                prim: prim.name(),
                expected: arity,
                got: inputs.len(),
            });
        }
        if arity == usize::MAX && inputs.is_empty() {
            return Err(Error::Arity {
                prim: prim.name(),
                expected: 1,
                got: 0,
            });
        }
        let value = self.forward(&prim, inputs)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Applied {
                prim,
                inputs: inputs.to_vec(),
            },
        });
        Ok(id)
    }

    // Convenience wrappers used throughout the model code.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Prim::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Prim::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Prim::Mul, &[a, b])
    }

    pub fn broadcast_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Prim::BroadcastAdd, &[a, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Prim::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Prim::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Prim::Softmax, &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Prim::LayerNorm, &[x, gain, bias])
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply(Prim::Concat, inputs)
    }

    pub fn concat_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply(Prim::ConcatRows, inputs)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Prim::SliceRows { start, len }, &[x])
    }

    pub fn mean_rows(&mut self, x: NodeId, sel: Vec<Vec<usize>>) -> Result<NodeId> {
        self.apply(Prim::MeanRows { sel }, &[x])
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        self.apply(Prim::GatherRows { idx }, &[table])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Prim::Sum, &[x])
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Prim::ScalarMul(c), &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Prim::AddScalar(c), &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Prim::Log, &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Prim::Clamp { lo, hi }, &[x])
    }

    pub fn mix_tokens(&mut self, x: NodeId, tokens: usize) -> Result<NodeId> {
        self.apply(Prim::MixTokens { tokens }, &[x])
    }

    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.apply(Prim::ScaleRows, &[x, s])
    }

    // ---- forward ----

    fn forward(&self, prim: &Prim, inputs: &[NodeId]) -> Result<Tensor> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        match prim {
            Prim::MatMul => {
                let (a, b) = (v(0), v(1));
                let (m, k) = a.dims2("matmul")?;
                let (k2, n) = b.dims2("matmul")?;
                if k != k2 {
                    return Err(shape_err("matmul", a, b));
                }
                let mut out = vec![0.0; m * n];
                let ad = a.data();
                let bd = b.data();
                for i in 0..m {
                    let arow = &ad[i * k..(i + 1) * k];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (p, &aip) in arow.iter().enumerate() {
                        let brow = &bd[p * n..(p + 1) * n];
                        for (o, &bpj) in orow.iter_mut().zip(brow.iter()) {
                            *o += aip * bpj;
                        }
                    }
                }
                Tensor::new(vec![m, n], out)
            }
            Prim::Add | Prim::Mul => {
                let (a, b) = (v(0), v(1));
                if a.shape() != b.shape() {
                    return Err(shape_err(prim.name(), a, b));
                }
                let data = match prim {
                    Prim::Add => a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
                    _ => a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                };
                Tensor::new(a.shape().to_vec(), data)
            }
            Prim::BroadcastAdd => {
                let (a, b) = (v(0), v(1));
                let (rows, cols) = a.dims2("broadcast_add")?;
                let (brows, bcols) = b.dims2("broadcast_add")?;
                if bcols != cols || brows == 0 || rows % brows != 0 {
                    return Err(shape_err("broadcast_add", a, b));
                }
                let ad = a.data();
                let bd = b.data();
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let br = r % brows;
                    for c in 0..cols {
                        out[r * cols + c] = ad[r * cols + c] + bd[br * cols + c];
                    }
                }
                Tensor::new(vec![rows, cols], out)
            }
            Prim::Relu => {
                let x = v(0);
                let data = x.data().iter().map(|&t| if t > 0.0 { t } else { 0.0 }).collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Prim::Sigmoid => {
                let x = v(0);
                let data = x.data().iter().map(|&t| 1.0 / (1.0 + (-t).exp())).collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Prim::Softmax => {
                let x = v(0);
                let d = x.last_dim();
                let rows = x.row_count();
                let xd = x.data();
                let mut out = vec![0.0; xd.len()];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (o, &t) in out[r * d..(r + 1) * d].iter_mut().zip(row.iter()) {
                        *o = (t - max).exp();
                        sum += *o;
                    }
                    for o in &mut out[r * d..(r + 1) * d] {
                        *o /= sum;
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Prim::LayerNorm => {
                let (x, gain, bias) = (v(0), v(1), v(2));
                let d = x.last_dim();
                if gain.shape() != [d] {
                    return Err(shape_err("layer_norm", x, gain));
                }
                if bias.shape() != [d] {
                    return Err(shape_err("layer_norm", x, bias));
                }
                let rows = x.row_count();
                let xd = x.data();
                let gd = gain.data();
                let bd = bias.data();
                let mut out = vec![0.0; xd.len()];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for c in 0..d {
                        out[r * d + c] = (row[c] - mean) * inv_std * gd[c] + bd[c];
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Prim::Concat => {
                let rows = v(0).row_count();
                let mut total = 0;
                for i in 0..inputs.len() {
                    let t = v(i);
                    if t.rank() != 2 || t.row_count() != rows {
                        return Err(shape_err("concat", v(0), t));
                    }
                    total += t.last_dim();
                }
                let mut out = vec![0.0; rows * total];
                for r in 0..rows {
                    let mut off = 0;
                    for i in 0..inputs.len() {
                        let t = v(i);
                        let d = t.last_dim();
                        out[r * total + off..r * total + off + d]
                            .copy_from_slice(&t.data()[r * d..(r + 1) * d]);
                        off += d;
                    }
                }
                Tensor::new(vec![rows, total], out)
            }
            Prim::ConcatRows => {
                let (_, cols) = v(0).dims2("concat_rows")?;
                let mut rows = 0;
                for i in 0..inputs.len() {
                    let (r, c) = v(i).dims2("concat_rows")?;
                    if c != cols {
                        return Err(shape_err("concat_rows", v(0), v(i)));
                    }
                    rows += r;
                }
                let mut out = Vec::with_capacity(rows * cols);
                for i in 0..inputs.len() {
                    out.extend_from_slice(v(i).data());
                }
                Tensor::new(vec![rows, cols], out)
            }
            Prim::SliceRows { start, len } => {
                let x = v(0);
                let (rows, cols) = x.dims2("slice_rows")?;
                if start + len > rows || *len == 0 {
                    return Err(shape_err1("slice_rows", x));
                }
                let data = x.data()[start * cols..(start + len) * cols].to_vec();
                Tensor::new(vec![*len, cols], data)
            }
            Prim::MeanRows { sel } => {
                let x = v(0);
                let (rows, cols) = x.dims2("mean_rows")?;
                if sel.is_empty() {
                    return Err(shape_err1("mean_rows", x));
                }
                let xd = x.data();
                let mut out = vec![0.0; sel.len() * cols];
                for (g, group) in sel.iter().enumerate() {
                    if group.is_empty() {
                        return Err(Error::EmptyScenarioSelection);
                    }
                    let inv = 1.0 / group.len() as f64;
                    for &r in group {
                        if r >= rows {
                            return Err(shape_err1("mean_rows", x));
                        }
                        for c in 0..cols {
                            out[g * cols + c] += xd[r * cols + c];
                        }
                    }
                    for c in 0..cols {
                        out[g * cols + c] *= inv;
                    }
                }
                Tensor::new(vec![sel.len(), cols], out)
            }
            Prim::GatherRows { idx } => {
                let table = v(0);
                let (rows, cols) = table.dims2("gather_rows")?;
                if idx.is_empty() {
                    return Err(shape_err1("gather_rows", table));
                }
                let td = table.data();
                let mut out = Vec::with_capacity(idx.len() * cols);
                for &r in idx {
                    if r >= rows {
                        return Err(shape_err1("gather_rows", table));
                    }
                    out.extend_from_slice(&td[r * cols..(r + 1) * cols]);
                }
                Tensor::new(vec![idx.len(), cols], out)
            }
            Prim::Sum => Ok(Tensor::scalar(v(0).data().iter().sum())),
            Prim::ScalarMul(c) => {
                let x = v(0);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|&t| t * c).collect())
            }
            Prim::AddScalar(c) => {
                let x = v(0);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|&t| t + c).collect())
            }
            Prim::Log => {
                let x = v(0);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|&t| t.ln()).collect())
            }
            Prim::Clamp { lo, hi } => {
                let x = v(0);
                Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().map(|&t| t.clamp(*lo, *hi)).collect(),
                )
            }
            Prim::MixTokens { tokens } => {
                let x = v(0);
                let (rows, d) = x.dims2("mix_tokens")?;
                if *tokens == 0 || rows % tokens != 0 || d % tokens != 0 {
                    return Err(shape_err1("mix_tokens", x));
                }
                Ok(mix_tokens_perm(x, *tokens))
            }
            Prim::ScaleRows => {
                let (x, s) = (v(0), v(1));
                let (rows, cols) = x.dims2("scale_rows")?;
                if s.shape() != [rows, 1] {
                    return Err(shape_err("scale_rows", x, s));
                }
                let xd = x.data();
                let sd = s.data();
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        out[r * cols + c] = xd[r * cols + c] * sd[r];
                    }
                }
                Tensor::new(vec![rows, cols], out)
            }
            Prim::AttnScores {
                heads,
                n_q,
                n_k,
                batch,
            } => {
                let (q, k) = (v(0), v(1));
                let (qrows, d) = q.dims2("attn_scores")?;
                let (krows, dk) = k.dims2("attn_scores")?;
                if qrows != n_q * batch || krows != n_k * batch || d != dk || d % heads != 0 {
                    return Err(shape_err("attn_scores", q, k));
                }
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qd = q.data();
                let kd = k.data();
                let mut out = vec![0.0; batch * heads * n_q * n_k];
                for i in 0..*batch {
                    for h in 0..*heads {
                        let hoff = h * dh;
                        for a in 0..*n_q {
                            let qrow = &qd[(a * batch + i) * d + hoff..(a * batch + i) * d + hoff + dh];
                            let orow_base = ((i * heads + h) * n_q + a) * n_k;
                            for t in 0..*n_k {
                                let krow =
                                    &kd[(t * batch + i) * d + hoff..(t * batch + i) * d + hoff + dh];
                                let mut s = 0.0;
                                for c in 0..dh {
                                    s += qrow[c] * krow[c];
                                }
                                out[orow_base + t] = s * scale;
                            }
                        }
                    }
                }
                Tensor::new(vec![batch * heads * n_q, *n_k], out)
            }
            Prim::AttnMix {
                heads,
                n_q,
                n_k,
                batch,
            } => {
                let (w, val) = (v(0), v(1));
                let (wrows, wcols) = w.dims2("attn_mix")?;
                let (vrows, d) = val.dims2("attn_mix")?;
                if wrows != batch * heads * n_q || wcols != *n_k || vrows != n_k * batch || d % heads != 0
                {
                    return Err(shape_err("attn_mix", w, val));
                }
                let dh = d / heads;
                let wd = w.data();
                let vd = val.data();
                let mut out = vec![0.0; n_q * batch * d];
                for i in 0..*batch {
                    for h in 0..*heads {
                        let hoff = h * dh;
                        for a in 0..*n_q {
                            let wrow = &wd[((i * heads + h) * n_q + a) * n_k..][..*n_k];
                            let obase = (a * batch + i) * d + hoff;
                            for (t, &wt) in wrow.iter().enumerate() {
                                let vrow = &vd[(t * batch + i) * d + hoff..][..dh];
                                for c in 0..dh {
                                    out[obase + c] += wt * vrow[c];
                                }
                            }
                        }
                    }
                }
                Tensor::new(vec![n_q * batch, d], out)
            }
        }
    }

    // ---- backward ----

    /// Gradient of a scalar loss node with respect to every node on the tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let (prim, inputs) = match &self.nodes[i].op {
                Op::Leaf => continue,
                Op::Applied { prim, inputs } => (prim, inputs),
            };
            // Split off the output gradient so input grads can be borrowed mutably.
            let g = std::mem::replace(&mut grads[i], Tensor::zeros(vec![1]));
            self.backprop(prim, inputs, i, &g, &mut grads);
            grads[i] = g;
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, prim: &Prim, inputs: &[NodeId], out: usize, g: &Tensor, grads: &mut [Tensor]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let out_val = &self.nodes[out].value;
        let gd = g.data();
        match prim {
            Prim::MatMul => {
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let ad = a.data();
                let bd = b.data();
                {
                    // dA = G * B^T
                    let da = grads[inputs[0].0].data_mut();
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let grow = &gd[i * n..(i + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                }
                {
                    // dB = A^T * G
                    let db = grads[inputs[1].0].data_mut();
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbrow[j] += aip * grow[j];
                            }
                        }
                    }
                }
            }
            Prim::Add => {
                for side in 0..2 {
                    let dst = grads[inputs[side].0].data_mut();
                    for (d, &gv) in dst.iter_mut().zip(gd) {
                        *d += gv;
                    }
                }
            }
            Prim::Mul => {
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                {
                    let da = grads[inputs[0].0].data_mut();
                    for ((d, &gv), &bv) in da.iter_mut().zip(gd).zip(b.data()) {
                        *d += gv * bv;
                    }
                }
                {
                    let db = grads[inputs[1].0].data_mut();
                    for ((d, &gv), &av) in db.iter_mut().zip(gd).zip(a.data()) {
                        *d += gv * av;
                    }
                }
            }
            Prim::BroadcastAdd => {
                let (rows, cols) = (out_val.shape()[0], out_val.shape()[1]);
                let brows = val(inputs[1]).shape()[0];
                {
                    let da = grads[inputs[0].0].data_mut();
                    for (d, &gv) in da.iter_mut().zip(gd) {
                        *d += gv;
                    }
                }
                {
                    let db = grads[inputs[1].0].data_mut();
                    for r in 0..rows {
                        let br = r % brows;
                        for c in 0..cols {
                            db[br * cols + c] += gd[r * cols + c];
                        }
                    }
                }
            }
            Prim::Relu => {
                let x = val(inputs[0]);
                let dx = grads[inputs[0].0].data_mut();
                for ((d, &gv), &xv) in dx.iter_mut().zip(gd).zip(x.data()) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Prim::Sigmoid => {
                let dx = grads[inputs[0].0].data_mut();
                for ((d, &gv), &sv) in dx.iter_mut().zip(gd).zip(out_val.data()) {
                    *d += gv * sv * (1.0 - sv);
                }
            }
            Prim::Softmax => {
                let d = out_val.last_dim();
                let rows = out_val.row_count();
                let sv = out_val.data();
                let dx = grads[inputs[0].0].data_mut();
                for r in 0..rows {
                    let srow = &sv[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for c in 0..d {
                        dx[r * d + c] += srow[c] * (grow[c] - dot);
                    }
                }
            }
            Prim::LayerNorm => {
                let x = val(inputs[0]);
                let gain = val(inputs[1]);
                let d = x.last_dim();
                let rows = x.row_count();
                let xd = x.data();
                let gaind = gain.data();
                let mut dx_buf = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mut dxhat_sum = 0.0;
                    let mut dxhat_xhat_sum = 0.0;
                    for c in 0..d {
                        let xhat = (row[c] - mean) * inv_std;
                        let dxhat = grow[c] * gaind[c];
                        dxhat_sum += dxhat;
                        dxhat_xhat_sum += dxhat * xhat;
                        dx_buf[c] = dxhat;
                    }
                    {
                        let dgain = grads[inputs[1].0].data_mut();
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv_std;
                            dgain[c] += grow[c] * xhat;
                        }
                    }
                    {
                        let dbias = grads[inputs[2].0].data_mut();
                        for c in 0..d {
                            dbias[c] += grow[c];
                        }
                    }
                    {
                        let dx = grads[inputs[0].0].data_mut();
                        let dn = d as f64;
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv_std;
                            dx[r * d + c] +=
                                inv_std / dn * (dn * dx_buf[c] - dxhat_sum - xhat * dxhat_xhat_sum);
                        }
                    }
                }
            }
            Prim::Concat => {
                let rows = out_val.row_count();
                let total = out_val.last_dim();
                let mut off = 0;
                for &inp in inputs {
                    let d = val(inp).last_dim();
                    let dst = grads[inp.0].data_mut();
                    for r in 0..rows {
                        for c in 0..d {
                            dst[r * d + c] += gd[r * total + off + c];
                        }
                    }
                    off += d;
                }
            }
            Prim::ConcatRows => {
                let mut off = 0;
                for &inp in inputs {
                    let n = val(inp).numel();
                    let dst = grads[inp.0].data_mut();
                    for (d, &gv) in dst.iter_mut().zip(&gd[off..off + n]) {
                        *d += gv;
                    }
                    off += n;
                }
            }
            Prim::SliceRows { start, len } => {
                let cols = out_val.shape()[1];
                let dst = grads[inputs[0].0].data_mut();
                for (d, &gv) in dst[start * cols..(start + len) * cols].iter_mut().zip(gd) {
                    *d += gv;
                }
            }
            Prim::MeanRows { sel } => {
                let cols = out_val.shape()[1];
                let dst = grads[inputs[0].0].data_mut();
                for (gidx, group) in sel.iter().enumerate() {
                    let inv = 1.0 / group.len() as f64;
                    for &r in group {
                        for c in 0..cols {
                            dst[r * cols + c] += gd[gidx * cols + c] * inv;
                        }
                    }
                }
            }
            Prim::GatherRows { idx } => {
                let cols = out_val.shape()[1];
                let dst = grads[inputs[0].0].data_mut();
                for (j, &r) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dst[r * cols + c] += gd[j * cols + c];
                    }
                }
            }
            Prim::Sum => {
                let dst = grads[inputs[0].0].data_mut();
                for d in dst.iter_mut() {
                    *d += gd[0];
                }
            }
            Prim::ScalarMul(c) => {
                let dst = grads[inputs[0].0].data_mut();
                for (d, &gv) in dst.iter_mut().zip(gd) {
                    *d += gv * c;
                }
            }
            Prim::AddScalar(_) => {
                let dst = grads[inputs[0].0].data_mut();
                for (d, &gv) in dst.iter_mut().zip(gd) {
                    *d += gv;
                }
            }
            Prim::Log => {
                let x = val(inputs[0]);
                let dst = grads[inputs[0].0].data_mut();
                for ((d, &gv), &xv) in dst.iter_mut().zip(gd).zip(x.data()) {
                    *d += gv / xv;
                }
            }
            Prim::Clamp { lo, hi } => {
                let x = val(inputs[0]);
                let dst = grads[inputs[0].0].data_mut();
                for ((d, &gv), &xv) in dst.iter_mut().zip(gd).zip(x.data()) {
                    if xv >= *lo && xv <= *hi {
                        *d += gv;
                    }
                }
            }
            Prim::MixTokens { tokens } => {
                // The shuffle is an involution, so the transpose of the
                // permutation is the permutation itself.
                let mixed = mix_tokens_perm(g, *tokens);
                let dst = grads[inputs[0].0].data_mut();
                for (d, &gv) in dst.iter_mut().zip(mixed.data()) {
                    *d += gv;
                }
            }
            Prim::ScaleRows => {
                let (x, s) = (val(inputs[0]), val(inputs[1]));
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let xd = x.data();
                let sd = s.data();
                {
                    let dx = grads[inputs[0].0].data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += gd[r * cols + c] * sd[r];
                        }
                    }
                }
                {
                    let ds = grads[inputs[1].0].data_mut();
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc += gd[r * cols + c] * xd[r * cols + c];
                        }
                        ds[r] += acc;
                    }
                }
            }
            Prim::AttnScores {
                heads,
                n_q,
                n_k,
                batch,
            } => {
                let (q, k) = (val(inputs[0]), val(inputs[1]));
                let d = q.shape()[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qd = q.data();
                let kd = k.data();
                for i in 0..*batch {
                    for h in 0..*heads {
                        let hoff = h * dh;
                        for a in 0..*n_q {
                            let grow = &gd[((i * heads + h) * n_q + a) * n_k..][..*n_k];
                            let qbase = (a * batch + i) * d + hoff;
                            for (t, &gv) in grow.iter().enumerate() {
                                let gs = gv * scale;
                                let kbase = (t * batch + i) * d + hoff;
                                {
                                    let dq = grads[inputs[0].0].data_mut();
                                    for c in 0..dh {
                                        dq[qbase + c] += gs * kd[kbase + c];
                                    }
                                }
                                {
                                    let dk = grads[inputs[1].0].data_mut();
                                    for c in 0..dh {
                                        dk[kbase + c] += gs * qd[qbase + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Prim::AttnMix {
                heads,
                n_q,
                n_k,
                batch,
            } => {
                let (w, vv) = (val(inputs[0]), val(inputs[1]));
                let d = vv.shape()[1];
                let dh = d / heads;
                let wd = w.data();
                let vd = vv.data();
                for i in 0..*batch {
                    for h in 0..*heads {
                        let hoff = h * dh;
                        for a in 0..*n_q {
                            let wbase = ((i * heads + h) * n_q + a) * n_k;
                            let gbase = (a * batch + i) * d + hoff;
                            for t in 0..*n_k {
                                let vbase = (t * batch + i) * d + hoff;
                                let mut dw_acc = 0.0;
                                {
                                    let dv = grads[inputs[1].0].data_mut();
                                    let wt = wd[wbase + t];
                                    for c in 0..dh {
                                        let gv = gd[gbase + c];
                                        dw_acc += gv * vd[vbase + c];
                                        dv[vbase + c] += wt * gv;
                                    }
                                }
                                grads[inputs[0].0].data_mut()[wbase + t] += dw_acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// The token-mixing permutation on a token-major (tokens*batch, d) matrix.
fn mix_tokens_perm(x: &Tensor, tokens: usize) -> Tensor {
    let rows = x.shape()[0];
    let d = x.shape()[1];
    let batch = rows / tokens;
    let seg = d / tokens;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for h in 0..tokens {
        for i in 0..batch {
            let orow = (h * batch + i) * d;
            for t in 0..tokens {
                let irow = (t * batch + i) * d;
                out[orow + t * seg..orow + (t + 1) * seg]
                    .copy_from_slice(&xd[irow + h * seg..irow + (h + 1) * seg]);
            }
        }
    }
    Tensor::new(vec![rows, d], out).expect("shape preserved")
}
