//! The computation tape: ops are recorded in execution order during the
//! forward pass and replayed in reverse by `backward`. Gradients accumulate
//! (+=) when a value fans out into several consumers. A tape is single-shot:
//! calling `backward` twice is an error.

use super::math;
use super::{numel, Tensor, TensorError};

/// Handle to a node on a tape. Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

enum Op {
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, out: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize, out: usize },
    AddRows { a: usize, b: usize, out: usize, rows: usize, cols: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Affine { a: usize, out: usize, mul: f64 },
    Embedding { table: usize, out: usize, ids: Vec<usize>, dim: usize },
    GatherRows { a: usize, out: usize, idxs: Vec<usize>, cols: usize },
    SliceCols { a: usize, out: usize, lo: usize, hi: usize, rows: usize, cols: usize },
    ConcatCols { parts: Vec<usize>, out: usize, rows: usize, widths: Vec<usize> },
    Softmax { a: usize, out: usize, rows: usize, cols: usize },
    SoftmaxCausal { a: usize, out: usize, n: usize },
    Gelu { a: usize, out: usize },
    RmsNorm { x: usize, gain: usize, out: usize, rows: usize, cols: usize },
    CrossEntropy { logits: usize, out: usize, targets: Vec<usize>, mask: Vec<bool>, rows: usize, cols: usize, n_active: usize },
    CosineSim { a: usize, b: usize, out: usize, eps: f64 },
    L2Norm { a: usize, out: usize },
    SumAll { a: usize, out: usize },
    MeanAll { a: usize, out: usize },
    StackScalars { parts: Vec<usize>, out: usize },
}

/// Reverse-mode autodiff tape over flat `f64` buffers.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn debug_check_finite(op: &'static str, data: &[f64]) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "{op}: non-finite value in forward output"
    );
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), grads: Vec::new(), consumed: false }
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Value {
        self.nodes.push(Node { shape, data, needs_grad });
        Value(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Leaf from raw parts.
    pub fn leaf_raw(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Value, TensorError> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch { shape, expected, actual: data.len() });
        }
        Ok(self.push_node(shape, data, requires_grad))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Value, TensorError> {
        self.leaf_raw(shape, data, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Value {
        self.push_node(vec![], vec![v], false)
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, v: Value) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient of a node, populated by `backward`. `None` when the node was
    /// not reached or does not require grad.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    // ── forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        math::matmul_nn(self.data(a), self.data(b), m, k, n, &mut out);
        debug_check_finite("matmul", &out);
        let ng = self.needs(a.0) || self.needs(b.0);
        let v = self.push_node(vec![m, n], out, ng);
        self.ops.push(Op::Matmul { a: a.0, b: b.0, out: v.0, m, k, n });
        Ok(v)
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value, TensorError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch { op: "transpose", expected: 2, shape: sa });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let ng = self.needs(a.0);
        let v = self.push_node(vec![cols, rows], out, ng);
        self.ops.push(Op::Transpose { a: a.0, out: v.0, rows, cols });
        Ok(v)
    }

    /// Elementwise add. Also accepts a trailing-shape `b` broadcast over the
    /// leading dimension of `a` (bias-add).
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out: Vec<f64> =
                self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
            debug_check_finite("add", &out);
            let ng = self.needs(a.0) || self.needs(b.0);
            let v = self.push_node(sa, out, ng);
            self.ops.push(Op::Add { a: a.0, b: b.0, out: v.0 });
            return Ok(v);
        }
        if sa.len() == sb.len() + 1 && sa[1..] == sb[..] {
            let rows = sa[0];
            let cols = numel(&sb);
            let (da, db) = (self.data(a), self.data(b));
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[i * cols + j] = da[i * cols + j] + db[j];
                }
            }
            debug_check_finite("add", &out);
            let ng = self.needs(a.0) || self.needs(b.0);
            let v = self.push_node(sa, out, ng);
            self.ops.push(Op::AddRows { a: a.0, b: b.0, out: v.0, rows, cols });
            return Ok(v);
        }
        Err(TensorError::ShapeMismatch { op: "add", lhs: sa, rhs: sb })
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "sub", lhs: sa, rhs: sb });
        }
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        debug_check_finite("sub", &out);
        let ng = self.needs(a.0) || self.needs(b.0);
        let v = self.push_node(sa, out, ng);
        self.ops.push(Op::Sub { a: a.0, b: b.0, out: v.0 });
        Ok(v)
    }

    /// Elementwise multiply (exact shapes).
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        debug_check_finite("mul", &out);
        let ng = self.needs(a.0) || self.needs(b.0);
        let v = self.push_node(sa, out, ng);
        self.ops.push(Op::Mul { a: a.0, b: b.0, out: v.0 });
        Ok(v)
    }

    /// y = mul * x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, a: Value, mul: f64, add: f64) -> Value {
        let out: Vec<f64> = self.data(a).iter().map(|&x| mul * x + add).collect();
        debug_check_finite("affine", &out);
        let ng = self.needs(a.0);
        let shape = self.shape(a).to_vec();
        let v = self.push_node(shape, out, ng);
        self.ops.push(Op::Affine { a: a.0, out: v.0, mul });
        v
    }

    /// Row lookup into an embedding table: `table[ids]`.
    pub fn embedding(&mut self, table: Value, ids: &[usize]) -> Result<Value, TensorError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::RankMismatch { op: "embedding", expected: 2, shape: st });
        }
        let (vocab, dim) = (st[0], st[1]);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange { op: "embedding", index: id, bound: vocab });
            }
        }
        let src = self.data(table);
        let mut out = vec![0.0; ids.len() * dim];
        for (t, &id) in ids.iter().enumerate() {
            out[t * dim..(t + 1) * dim].copy_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let ng = self.needs(table.0);
        let v = self.push_node(vec![ids.len(), dim], out, ng);
        self.ops.push(Op::Embedding { table: table.0, out: v.0, ids: ids.to_vec(), dim });
        Ok(v)
    }

    /// Gathers rows of a matrix; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, a: Value, idxs: &[usize]) -> Result<Value, TensorError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch { op: "gather-rows", expected: 2, shape: sa });
        }
        let (rows, cols) = (sa[0], sa[1]);
        for &i in idxs {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { op: "gather-rows", index: i, bound: rows });
            }
        }
        let src = self.data(a);
        let mut out = vec![0.0; idxs.len() * cols];
        for (t, &i) in idxs.iter().enumerate() {
            out[t * cols..(t + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.needs(a.0);
        let v = self.push_node(vec![idxs.len(), cols], out, ng);
        self.ops.push(Op::GatherRows { a: a.0, out: v.0, idxs: idxs.to_vec(), cols });
        Ok(v)
    }

    /// Column slice [lo, hi) of a matrix.
    pub fn slice_cols(&mut self, a: Value, lo: usize, hi: usize) -> Result<Value, TensorError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch { op: "slice-cols", expected: 2, shape: sa });
        }
        let (rows, cols) = (sa[0], sa[1]);
        if lo >= hi || hi > cols {
            return Err(TensorError::IndexOutOfRange { op: "slice-cols", index: hi, bound: cols });
        }
        let w = hi - lo;
        let src = self.data(a);
        let mut out = vec![0.0; rows * w];
        for i in 0..rows {
            out[i * w..(i + 1) * w].copy_from_slice(&src[i * cols + lo..i * cols + hi]);
        }
        let ng = self.needs(a.0);
        let v = self.push_node(vec![rows, w], out, ng);
        self.ops.push(Op::SliceCols { a: a.0, out: v.0, lo, hi, rows, cols });
        Ok(v)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat-cols" });
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(TensorError::RankMismatch { op: "concat-cols", expected: 2, shape: first });
        }
        let rows = first[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p).to_vec();
            if sp.len() != 2 || sp[0] != rows {
                return Err(TensorError::ShapeMismatch { op: "concat-cols", lhs: first, rhs: sp });
            }
            widths.push(sp[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for i in 0..rows {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        let v = self.push_node(vec![rows, total], out, ng);
        self.ops.push(Op::ConcatCols {
            parts: parts.iter().map(|p| p.0).collect(),
            out: v.0,
            rows,
            widths,
        });
        Ok(v)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Value) -> Result<Value, TensorError> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(TensorError::RankMismatch { op: "softmax", expected: 1, shape: sa });
        }
        let cols = *sa.last().unwrap();
        if cols == 0 {
            return Err(TensorError::EmptyInput { op: "softmax" });
        }
        let rows = numel(&sa) / cols;
        let mut out = self.data(a).to_vec();
        for i in 0..rows {
            math::softmax_row(&mut out[i * cols..(i + 1) * cols]);
        }
        debug_check_finite("softmax", &out);
        let ng = self.needs(a.0);
        let v = self.push_node(sa, out, ng);
        self.ops.push(Op::Softmax { a: a.0, out: v.0, rows, cols });
        Ok(v)
    }

    /// Row-wise softmax over the causal prefix of a square score matrix:
    /// row i is a distribution over columns 0..=i, and columns above the
    /// diagonal are exactly zero. Masking is structural, so position t is
    /// bit-exactly independent of positions after t.
    pub fn softmax_causal(&mut self, a: Value) -> Result<Value, TensorError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != sa[1] {
            return Err(TensorError::ShapeMismatch { op: "softmax-causal", lhs: sa.clone(), rhs: sa });
        }
        let n = sa[0];
        let src = self.data(a);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &src[i * n..i * n + i + 1];
            let dst = &mut out[i * n..i * n + i + 1];
            dst.copy_from_slice(row);
            math::softmax_row(dst);
        }
        debug_check_finite("softmax-causal", &out);
        let ng = self.needs(a.0);
        let v = self.push_node(sa, out, ng);
        self.ops.push(Op::SoftmaxCausal { a: a.0, out: v.0, n });
        Ok(v)
    }

    pub fn gelu(&mut self, a: Value) -> Value {
        let out: Vec<f64> = self.data(a).iter().map(|&x| math::gelu(x)).collect();
        debug_check_finite("gelu", &out);
        let ng = self.needs(a.0);
        let shape = self.shape(a).to_vec();
        let v = self.push_node(shape, out, ng);
        self.ops.push(Op::Gelu { a: a.0, out: v.0 });
        v
    }

    /// RMS normalization along the last axis with a learnable gain vector.
    pub fn rmsnorm(&mut self, x: Value, gain: Value) -> Result<Value, TensorError> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(gain).to_vec());
        if sx.is_empty() || sg.len() != 1 || sg[0] != *sx.last().unwrap() {
            return Err(TensorError::ShapeMismatch { op: "rmsnorm", lhs: sx, rhs: sg });
        }
        let cols = sg[0];
        let rows = numel(&sx) / cols;
        let (dx, dg) = (self.data(x), self.data(gain));
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            math::rmsnorm_row(&dx[i * cols..(i + 1) * cols], dg, &mut out[i * cols..(i + 1) * cols]);
        }
        debug_check_finite("rmsnorm", &out);
        let ng = self.needs(x.0) || self.needs(gain.0);
        let v = self.push_node(sx, out, ng);
        self.ops.push(Op::RmsNorm { x: x.0, gain: gain.0, out: v.0, rows, cols });
        Ok(v)
    }

    /// Mean negative log-likelihood of integer targets under the logits,
    /// averaged over unmasked positions (`mask[t] == true` counts).
    pub fn cross_entropy(
        &mut self,
        logits: Value,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Value, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(TensorError::RankMismatch { op: "cross-entropy", expected: 2, shape: sl });
        }
        let (rows, cols) = (sl[0], sl[1]);
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross-entropy",
                lhs: sl,
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let n_active = mask.iter().filter(|&&m| m).count();
        if n_active == 0 {
            return Err(TensorError::AllPositionsMasked);
        }
        let src = self.data(logits);
        let mut total = 0.0;
        for t in 0..rows {
            if !mask[t] {
                continue;
            }
            let tgt = targets[t];
            if tgt >= cols {
                return Err(TensorError::IndexOutOfRange { op: "cross-entropy", index: tgt, bound: cols });
            }
            let row = &src[t * cols..(t + 1) * cols];
            total += math::logsumexp_row(row) - row[tgt];
        }
        let loss = total / n_active as f64;
        debug_check_finite("cross-entropy", &[loss]);
        let ng = self.needs(logits.0);
        let v = self.push_node(vec![], vec![loss], ng);
        self.ops.push(Op::CrossEntropy {
            logits: logits.0,
            out: v.0,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            rows,
            cols,
            n_active,
        });
        Ok(v)
    }

    /// Cosine similarity of two equal-length vectors (any shape, compared
    /// flat), with the denominator stabilized as `|a||b| + eps`.
    pub fn cosine_sim(&mut self, a: Value, b: Value, eps: f64) -> Result<Value, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if numel(&sa) != numel(&sb) {
            return Err(TensorError::ShapeMismatch { op: "cosine-sim", lhs: sa, rhs: sb });
        }
        if numel(&sa) == 0 {
            return Err(TensorError::EmptyInput { op: "cosine-sim" });
        }
        let (da, db) = (self.data(a), self.data(b));
        let s = math::dot(da, db);
        let denom = math::l2_norm(da) * math::l2_norm(db) + eps;
        let c = s / denom;
        debug_check_finite("cosine-sim", &[c]);
        let ng = self.needs(a.0) || self.needs(b.0);
        let v = self.push_node(vec![], vec![c], ng);
        self.ops.push(Op::CosineSim { a: a.0, b: b.0, out: v.0, eps });
        Ok(v)
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&mut self, a: Value) -> Value {
        let n = math::l2_norm(self.data(a));
        let ng = self.needs(a.0);
        let v = self.push_node(vec![], vec![n], ng);
        self.ops.push(Op::L2Norm { a: a.0, out: v.0 });
        v
    }

    pub fn sum_all(&mut self, a: Value) -> Value {
        let s: f64 = self.data(a).iter().sum();
        let ng = self.needs(a.0);
        let v = self.push_node(vec![], vec![s], ng);
        self.ops.push(Op::SumAll { a: a.0, out: v.0 });
        v
    }

    pub fn mean_all(&mut self, a: Value) -> Value {
        let len = self.data(a).len().max(1);
        let s: f64 = self.data(a).iter().sum::<f64>() / len as f64;
        let ng = self.needs(a.0);
        let v = self.push_node(vec![], vec![s], ng);
        self.ops.push(Op::MeanAll { a: a.0, out: v.0 });
        v
    }

    /// Stacks scalar nodes into a 1-D vector (used to average loss terms).
    pub fn stack_scalars(&mut self, parts: &[Value]) -> Result<Value, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack-scalars" });
        }
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if numel(sp) != 1 {
                return Err(TensorError::NotScalar { op: "stack-scalars", shape: sp.to_vec() });
            }
            out.push(self.data(p)[0]);
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        let v = self.push_node(vec![parts.len()], out, ng);
        self.ops.push(Op::StackScalars { parts: parts.iter().map(|p| p.0).collect(), out: v.0 });
        Ok(v)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Fills gradients for every node that
    /// requires grad and is reachable from the root. Single-shot per tape.
    pub fn backward(&mut self, root: Value) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        let rn = &self.nodes[root.0];
        if rn.data.len() != 1 {
            return Err(TensorError::NotScalar { op: "backward", shape: rn.shape.clone() });
        }
        if !rn.needs_grad {
            return Err(TensorError::RootHasNoGrad);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for op in self.ops.iter().rev() {
            apply_backward(op, &self.nodes, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], idx: usize) -> &'a mut [f64] {
    grads[idx]
        .get_or_insert_with(|| vec![0.0; nodes[idx].data.len()])
        .as_mut_slice()
}

fn apply_backward(op: &Op, nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    // Temporarily take the output gradient out of the table so input slots can
    // be borrowed mutably; every op writes a fresh output node, so out never
    // aliases an input.
    macro_rules! with_gout_v {
        ($out:expr, |$g:ident| $body:block) => {
            if let Some(gv) = grads[*$out].take() {
                {
                    let $g: &[f64] = &gv;
                    $body
                }
                grads[*$out] = Some(gv);
            }
        };
    }

    match op {
        Op::Matmul { a, b, out, m, k, n } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                let bd = &nodes[*b].data;
                math::matmul_nt(g, bd, *m, *n, *k, slot(grads, nodes, *a));
            }
            if nodes[*b].needs_grad {
                let ad = &nodes[*a].data;
                math::matmul_tn(ad, g, *k, *m, *n, slot(grads, nodes, *b));
            }
        }),
        Op::Transpose { a, out, rows, cols } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                let ga = slot(grads, nodes, *a);
                for i in 0..*rows {
                    for j in 0..*cols {
                        ga[i * cols + j] += g[j * rows + i];
                    }
                }
            }
        }),
        Op::Add { a, b, out } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                for (x, &v) in slot(grads, nodes, *a).iter_mut().zip(g) {
                    *x += v;
                }
            }
            if nodes[*b].needs_grad {
                for (x, &v) in slot(grads, nodes, *b).iter_mut().zip(g) {
                    *x += v;
                }
            }
        }),
        Op::AddRows { a, b, out, rows, cols } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                for (x, &v) in slot(grads, nodes, *a).iter_mut().zip(g) {
                    *x += v;
                }
            }
            if nodes[*b].needs_grad {
                let gb = slot(grads, nodes, *b);
                for i in 0..*rows {
                    for j in 0..*cols {
                        gb[j] += g[i * cols + j];
                    }
                }
            }
        }),
        Op::Sub { a, b, out } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                for (x, &v) in slot(grads, nodes, *a).iter_mut().zip(g) {
                    *x += v;
                }
            }
            if nodes[*b].needs_grad {
                for (x, &v) in slot(grads, nodes, *b).iter_mut().zip(g) {
                    *x -= v;
                }
            }
        }),
        Op::Mul { a, b, out } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                let bd = &nodes[*b].data;
                for ((x, &v), &bv) in slot(grads, nodes, *a).iter_mut().zip(g).zip(bd) {
                    *x += v * bv;
                }
            }
            if nodes[*b].needs_grad {
                let ad = &nodes[*a].data;
                for ((x, &v), &av) in slot(grads, nodes, *b).iter_mut().zip(g).zip(ad) {
                    *x += v * av;
                }
            }
        }),
        Op::Affine { a, out, mul } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                for (x, &v) in slot(grads, nodes, *a).iter_mut().zip(g) {
                    *x += mul * v;
                }
            }
        }),
        Op::Embedding { table, out, ids, dim } => with_gout_v!(out, |g| {
            if nodes[*table].needs_grad {
                let gt = slot(grads, nodes, *table);
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..*dim {
                        gt[id * dim + j] += g[t * dim + j];
                    }
                }
            }
        }),
        Op::GatherRows { a, out, idxs, cols } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                let ga = slot(grads, nodes, *a);
                for (t, &i) in idxs.iter().enumerate() {
                    for j in 0..*cols {
                        ga[i * cols + j] += g[t * cols + j];
                    }
                }
            }
        }),
        Op::SliceCols { a, out, lo, hi, rows, cols } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                let w = hi - lo;
                let ga = slot(grads, nodes, *a);
                for i in 0..*rows {
                    for j in 0..w {
                        ga[i * cols + lo + j] += g[i * w + j];
                    }
                }
            }
        }),
        Op::ConcatCols { parts, out, rows, widths } => with_gout_v!(out, |g| {
            let total: usize = widths.iter().sum();
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                if nodes[p].needs_grad {
                    let gp = slot(grads, nodes, p);
                    for i in 0..*rows {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }),
        Op::Softmax { a, out, rows, cols } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                let p = &nodes[*out].data;
                let ga = slot(grads, nodes, *a);
                for i in 0..*rows {
                    let pr = &p[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot = math::dot(gr, pr);
                    let dst = &mut ga[i * cols..(i + 1) * cols];
                    for ((d, &pv), &gv) in dst.iter_mut().zip(pr).zip(gr) {
                        *d += pv * (gv - dot);
                    }
                }
            }
        }),
        Op::SoftmaxCausal { a, out, n } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                let p = &nodes[*out].data;
                let ga = slot(grads, nodes, *a);
                for i in 0..*n {
                    let pr = &p[i * n..i * n + i + 1];
                    let gr = &g[i * n..i * n + i + 1];
                    let dot = math::dot(gr, pr);
                    let dst = &mut ga[i * n..i * n + i + 1];
                    for ((d, &pv), &gv) in dst.iter_mut().zip(pr).zip(gr) {
                        *d += pv * (gv - dot);
                    }
                }
            }
        }),
        Op::Gelu { a, out } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                let xd = &nodes[*a].data;
                for ((x, &v), &xv) in slot(grads, nodes, *a).iter_mut().zip(g).zip(xd) {
                    *x += v * math::gelu_grad(xv);
                }
            }
        }),
        Op::RmsNorm { x, gain, out, rows, cols } => with_gout_v!(out, |g| {
            let xd = &nodes[*x].data;
            let gd = &nodes[*gain].data;
            if nodes[*x].needs_grad {
                let gx = slot(grads, nodes, *x);
                for i in 0..*rows {
                    let xr = &xd[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let inv = math::rmsnorm_inv(xr);
                    let mut tx = 0.0;
                    for ((&gv, &gnv), &xv) in gr.iter().zip(gd.iter()).zip(xr) {
                        tx += gv * gnv * xv;
                    }
                    let coef = inv * inv * inv / *cols as f64;
                    let dst = &mut gx[i * cols..(i + 1) * cols];
                    for ((d, (&gv, &gnv)), &xv) in dst.iter_mut().zip(gr.iter().zip(gd.iter())).zip(xr) {
                        *d += inv * gv * gnv - coef * xv * tx;
                    }
                }
            }
            if nodes[*gain].needs_grad {
                let gg = slot(grads, nodes, *gain);
                for i in 0..*rows {
                    let xr = &xd[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let inv = math::rmsnorm_inv(xr);
                    for ((gacc, &gv), &xv) in gg.iter_mut().zip(gr).zip(xr) {
                        *gacc += gv * xv * inv;
                    }
                }
            }
        }),
        Op::CrossEntropy { logits, out, targets, mask, rows, cols, n_active } => {
            with_gout_v!(out, |g| {
                if nodes[*logits].needs_grad {
                    let scale = g[0] / *n_active as f64;
                    let ld = &nodes[*logits].data;
                    let gl = slot(grads, nodes, *logits);
                    for t in 0..*rows {
                        if !mask[t] {
                            continue;
                        }
                        let row = &ld[t * cols..(t + 1) * cols];
                        let mut p = row.to_vec();
                        math::softmax_row(&mut p);
                        let dst = &mut gl[t * cols..(t + 1) * cols];
                        for (d, &pv) in dst.iter_mut().zip(&p) {
                            *d += scale * pv;
                        }
                        dst[targets[t]] -= scale;
                    }
                }
            })
        }
        Op::CosineSim { a, b, out, eps } => with_gout_v!(out, |g| {
            let ad = &nodes[*a].data;
            let bd = &nodes[*b].data;
            let s = math::dot(ad, bd);
            let na = math::l2_norm(ad);
            let nb = math::l2_norm(bd);
            let denom = na * nb + eps;
            let gout = g[0];
            if nodes[*a].needs_grad {
                // d/da_i [ s/D ] = b_i/D - s*nb*(a_i/na)/D^2 ; at na == 0 the
                // second term vanishes (s == 0), so drop it.
                let coef = if na > 0.0 { s * nb / (denom * denom * na) } else { 0.0 };
                let ga = slot(grads, nodes, *a);
                for ((x, &bv), &av) in ga.iter_mut().zip(bd).zip(ad) {
                    *x += gout * (bv / denom - coef * av);
                }
            }
            if nodes[*b].needs_grad {
                let coef = if nb > 0.0 { s * na / (denom * denom * nb) } else { 0.0 };
                let gb = slot(grads, nodes, *b);
                for ((x, &av), &bv) in gb.iter_mut().zip(ad).zip(bd) {
                    *x += gout * (av / denom - coef * bv);
                }
            }
        }),
        Op::L2Norm { a, out } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                let ad = &nodes[*a].data;
                let n = math::l2_norm(ad);
                if n > 0.0 {
                    let coef = g[0] / n;
                    for (x, &av) in slot(grads, nodes, *a).iter_mut().zip(ad) {
                        *x += coef * av;
                    }
                }
            }
        }),
        Op::SumAll { a, out } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                let gv = g[0];
                for x in slot(grads, nodes, *a).iter_mut() {
                    *x += gv;
                }
            }
        }),
        Op::MeanAll { a, out } => with_gout_v!(out, |g| {
            if nodes[*a].needs_grad {
                let gv = g[0] / nodes[*a].data.len().max(1) as f64;
                for x in slot(grads, nodes, *a).iter_mut() {
                    *x += gv;
                }
            }
        }),
        Op::StackScalars { parts, out } => with_gout_v!(out, |g| {
            for (i, &p) in parts.iter().enumerate() {
                if nodes[p].needs_grad {
                    slot(grads, nodes, p)[0] += g[i];
                }
            }
        }),
    }
}
