//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in topological order during the forward pass;
//! [`Tape::backward`] replays them in reverse, accumulating gradients into
//! every reachable node that requires them. Multiple uses of one node sum
//! their gradients (multivariate chain rule).
//!
//! A tape and its tensors are confined to one thread for the duration of a
//! forward/backward pass; there is no internal locking.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a recorded node. Valid only for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Min,
}

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Leaf,
    Constant,
    MatMul { a: NodeId, b: NodeId },
    MatVec { a: NodeId, x: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Neg { x: NodeId },
    Scale { x: NodeId, c: F },
    AddScalar { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Relu { x: NodeId },
    Sqrt { x: NodeId },
    MaxElem { a: NodeId, b: NodeId },
    /// Row-wise softmax over the columns flagged valid; invalid columns are
    /// exactly zero in the output.
    SoftmaxRows { x: NodeId, valid: Vec<bool> },
    /// Sum over valid rows of `logsumexp(row) - row[target]`.
    CrossEntropySum {
        logits: NodeId,
        targets: Vec<usize>,
        valid: Vec<bool>,
    },
    /// Column-wise reduction over valid rows; `arg` holds the winning row
    /// per column for max/min (lowest index on ties).
    MaskedReduce {
        x: NodeId,
        mask: Vec<bool>,
        kind: ReduceKind,
        arg: Vec<usize>,
    },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Row { x: NodeId, index: usize },
    StackRows { parts: Vec<NodeId> },
    /// Gather rows of `table` by id; the pad id always yields (and receives
    /// back) zeros.
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
        pad: usize,
    },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
}

impl<F: Real> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::MatVec { .. } => "matvec",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Neg { .. } => "neg",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Sqrt { .. } => "sqrt",
            Op::MaxElem { .. } => "max_elem",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::CrossEntropySum { .. } => "cross_entropy",
            Op::MaskedReduce { .. } => "masked_reduce",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Row { .. } => "row",
            Op::StackRows { .. } => "stack_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
        }
    }
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradient slots produced by one backward pass, indexed by node id.
pub struct Gradients<F: Real> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }
}

/// Recording tape. Create one per forward/backward pass.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    checked: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// A tape that scans every op output for NaN/Inf and fails fast.
    pub fn new_checked() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Trainable input: receives a gradient slot in backward.
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Fixed input: treated as a constant, never receives gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push_unchecked(value, Op::Constant, false)
    }

    pub fn scalar_const(&mut self, v: F) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn vec_const(&mut self, v: Vec<F>) -> NodeId {
        self.constant(Tensor::from_vec(v))
    }

    pub fn zeros_const(&mut self, shape: Vec<usize>) -> NodeId {
        self.constant(Tensor::zeros(shape))
    }

    fn push_unchecked(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<NodeId> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_vals(self.value(a), self.value(b))?;
        let needs = self.needs(&[a, b]);
        self.push(v, Op::MatMul { a, b }, needs)
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let n = self.value(x).dim1()?;
        if k != n {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(x).shape().to_vec(),
            });
        }
        let av = self.value(a);
        let xv = self.value(x);
        let mut out = vec![F::zero(); m];
        for i in 0..m {
            let row = av.row_slice(i);
            let mut s = F::zero();
            for p in 0..k {
                s = s + row[p] * xv.at1(p);
            }
            out[i] = s;
        }
        let needs = self.needs(&[a, x]);
        self.push(Tensor::from_vec(out), Op::MatVec { a, x }, needs)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = transpose_vals(self.value(x))?;
        let needs = self.needs(&[x]);
        self.push(v, Op::Transpose { x }, needs)
    }

    // ── elementwise (broadcasting) ──────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = binary_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        self.push(v, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = binary_broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let needs = self.needs(&[a, b]);
        self.push(v, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = binary_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        self.push(v, Op::Mul { a, b }, needs)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = binary_broadcast("div", self.value(a), self.value(b), |x, y| x / y)?;
        let needs = self.needs(&[a, b]);
        self.push(v, Op::Div { a, b }, needs)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| -v);
        let needs = self.needs(&[x]);
        self.push(v, Op::Neg { x }, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> Result<NodeId> {
        let v = self.value(x).map(|v| v * c);
        let needs = self.needs(&[x]);
        self.push(v, Op::Scale { x, c }, needs)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: F) -> Result<NodeId> {
        let v = self.value(x).map(|v| v + c);
        let needs = self.needs(&[x]);
        self.push(v, Op::AddScalar { x }, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.tanh());
        let needs = self.needs(&[x]);
        self.push(v, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let one = F::one();
        let v = self.value(x).map(|v| one / (one + (-v).exp()));
        let needs = self.needs(&[x]);
        self.push(v, Op::Sigmoid { x }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let z = F::zero();
        let v = self.value(x).map(|v| if v > z { v } else { z });
        let needs = self.needs(&[x]);
        self.push(v, Op::Relu { x }, needs)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.sqrt());
        let needs = self.needs(&[x]);
        self.push(v, Op::Sqrt { x }, needs)
    }

    /// Elementwise maximum; ties route gradient to `a`.
    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self
            .value(a)
            .zip(self.value(b), |x, y| if x >= y { x } else { y })
            .map_err(|_| Error::ShapeMismatch {
                op: "max_elem",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            })?;
        let needs = self.needs(&[a, b]);
        self.push(v, Op::MaxElem { a, b }, needs)
    }

    // ── softmax / loss ──────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let cols = row_width(self.value(x))?;
        let valid = vec![true; cols];
        self.masked_softmax_rows(x, &valid)
    }

    /// Softmax across each row, restricted to valid columns. Invalid
    /// columns get weight exactly 0; each row's valid weights sum to 1.
    pub fn masked_softmax_rows(&mut self, x: NodeId, valid: &[bool]) -> Result<NodeId> {
        let xv = self.value(x);
        let cols = row_width(xv)?;
        if valid.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![valid.len()],
            });
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Contract(
                "softmax_rows: all positions masked".into(),
            ));
        }
        let rows = xv.numel() / cols;
        let mut data = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            softmax_row(row, valid, out);
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        self.push(
            v,
            Op::SoftmaxRows {
                x,
                valid: valid.to_vec(),
            },
            needs,
        )
    }

    /// Sum over valid rows of the cross entropy between `softmax(logits)`
    /// and the gold id. Mean reductions are composed with [`Tape::scale`].
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        valid: &[bool],
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.dims2()?;
        if targets.len() != rows || valid.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy: {rows} logit rows, {} targets, {} valid flags",
                targets.len(),
                valid.len()
            )));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Contract("cross_entropy: no valid positions".into()));
        }
        let mut total = F::zero();
        for r in 0..rows {
            if !valid[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Contract(format!(
                    "cross_entropy: target id {t} out of range {vocab}"
                )));
            }
            let row = lv.row_slice(r);
            let lse = log_sum_exp(row);
            total = total + lse - row[t];
        }
        let needs = self.needs(&[logits]);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
            },
            needs,
        )
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Column-wise reduction of `[T, d]` over rows with `mask` true.
    /// Max/min gradients go to the winning row only (lowest index on
    /// ties); mean gradient is uniform over contributing rows.
    pub fn masked_reduce(&mut self, x: NodeId, mask: &[bool], kind: ReduceKind) -> Result<NodeId> {
        let xv = self.value(x);
        let (t_len, d) = xv.dims2()?;
        if mask.len() != t_len {
            return Err(Error::ShapeMismatch {
                op: "masked_reduce",
                lhs: xv.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyPool);
        }
        let mut out = vec![F::zero(); d];
        let mut arg = vec![0usize; d];
        match kind {
            ReduceKind::Mean => {
                let denom = F::from_f64(count as f64);
                for (t, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let row = xv.row_slice(t);
                    for j in 0..d {
                        out[j] = out[j] + row[j];
                    }
                }
                for v in out.iter_mut() {
                    *v = *v / denom;
                }
            }
            ReduceKind::Max | ReduceKind::Min => {
                let mut started = vec![false; d];
                for (t, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let row = xv.row_slice(t);
                    for j in 0..d {
                        let better = !started[j]
                            || match kind {
                                ReduceKind::Max => row[j] > out[j],
                                _ => row[j] < out[j],
                            };
                        if better {
                            out[j] = row[j];
                            arg[j] = t;
                            started[j] = true;
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        self.push(
            Tensor::from_vec(out),
            Op::MaskedReduce {
                x,
                mask: mask.to_vec(),
                kind,
                arg,
            },
            needs,
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut s = F::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        let mut s = F::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        let v = s * F::from_f64(1.0 / n as f64);
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(v), Op::MeanAll { x }, needs)
    }

    // ── structure ───────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat: no parts".into()));
        }
        let first = self.value(parts[0]);
        let rank = first.rank();
        if rank == 0 || axis >= rank {
            return Err(Error::Contract(format!(
                "concat: axis {axis} invalid for rank {rank}"
            )));
        }
        let mut out_shape = first.shape().to_vec();
        for &p in &parts[1..] {
            let s = self.value(p).shape();
            if s.len() != rank
                || (0..rank).any(|i| i != axis && s[i] != out_shape[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: out_shape.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let value = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::from_vec(data)
            }
            (2, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(out_shape, data)?
            }
            (2, 1) => {
                let rows = out_shape[0];
                let mut data = Vec::with_capacity(rows * out_shape[1]);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::new(out_shape, data)?
            }
            _ => {
                return Err(Error::Contract(format!(
                    "concat: unsupported rank {rank} axis {axis}"
                )))
            }
        };
        let needs = self.needs(parts);
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let rank = xv.rank();
        if axis >= rank || rank == 0 || rank > 2 {
            return Err(Error::Contract(format!(
                "slice: axis {axis} invalid for rank {rank}"
            )));
        }
        if len == 0 || start + len > xv.shape()[axis] {
            return Err(Error::Contract(format!(
                "slice: range {start}..{} out of bounds for extent {}",
                start + len,
                xv.shape()[axis]
            )));
        }
        let value = match (rank, axis) {
            (1, 0) => Tensor::from_vec(xv.data()[start..start + len].to_vec()),
            (2, 0) => {
                let cols = xv.shape()[1];
                Tensor::new(
                    vec![len, cols],
                    xv.data()[start * cols..(start + len) * cols].to_vec(),
                )?
            }
            (2, 1) => {
                let rows = xv.shape()[0];
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    let row = xv.row_slice(r);
                    data.extend_from_slice(&row[start..start + len]);
                }
                Tensor::new(vec![rows, len], data)?
            }
            _ => unreachable!(),
        };
        let needs = self.needs(&[x]);
        self.push(
            value,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            needs,
        )
    }

    /// Extract row `index` of a matrix as a vector.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, _) = xv.dims2()?;
        if index >= rows {
            return Err(Error::Contract(format!(
                "row: index {index} out of bounds for {rows} rows"
            )));
        }
        let value = Tensor::from_vec(xv.row_slice(index).to_vec());
        let needs = self.needs(&[x]);
        self.push(value, Op::Row { x, index }, needs)
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_rows: no parts".into()));
        }
        let d = self.value(parts[0]).dim1()?;
        let mut data = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            let pv = self.value(p);
            if pv.dim1()? != d {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: pv.shape().to_vec(),
                });
            }
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![parts.len(), d], data)?;
        let needs = self.needs(parts);
        self.push(
            value,
            Op::StackRows {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    /// Gather `table` rows by id. The pad id yields zeros and never
    /// receives gradient, keeping the pad embedding pinned at zero.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize], pad: usize) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows: empty id sequence".into()));
        }
        let tv = self.value(table);
        let (vocab, d) = tv.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Contract(format!(
                    "gather_rows: id {id} out of range {vocab}"
                )));
            }
            if id == pad {
                data.extend(std::iter::repeat(F::zero()).take(d));
            } else {
                data.extend_from_slice(tv.row_slice(id));
            }
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let needs = self.needs(&[table]);
        self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
                pad,
            },
            needs,
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns a gradient for every
    /// reachable node with `needs_grad`; unreachable ones stay absent.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(lv.shape().to_vec(), F::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let gy = match slots[id].clone() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &gy, &mut slots)?;
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut slots[id.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        id: usize,
        gy: &Tensor<F>,
        slots: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(slots, *a, matmul_nt(gy, bv));
                self.accumulate(slots, *b, matmul_tn(av, gy));
            }
            Op::MatVec { a, x } => {
                let av = self.value(*a);
                let xv = self.value(*x);
                let (m, k) = av.dims2()?;
                let mut ga = vec![F::zero(); m * k];
                let mut gx = vec![F::zero(); k];
                for i in 0..m {
                    let g = gy.at1(i);
                    let row = av.row_slice(i);
                    for p in 0..k {
                        ga[i * k + p] = g * xv.at1(p);
                        gx[p] = gx[p] + row[p] * g;
                    }
                }
                self.accumulate(slots, *a, Tensor::new(vec![m, k], ga)?);
                self.accumulate(slots, *x, Tensor::from_vec(gx));
            }
            Op::Transpose { x } => {
                self.accumulate(slots, *x, transpose_vals(gy)?);
            }
            Op::Add { a, b } => {
                self.accumulate(slots, *a, reduce_to_shape(gy, self.value(*a).shape()));
                self.accumulate(slots, *b, reduce_to_shape(gy, self.value(*b).shape()));
            }
            Op::Sub { a, b } => {
                self.accumulate(slots, *a, reduce_to_shape(gy, self.value(*a).shape()));
                let neg = gy.map(|v| -v);
                self.accumulate(slots, *b, reduce_to_shape(&neg, self.value(*b).shape()));
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (ga, gb) = binary_grads(gy, av, bv, |_, y| y, |x, _| x);
                self.accumulate(slots, *a, ga);
                self.accumulate(slots, *b, gb);
            }
            Op::Div { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let one = F::one();
                let (ga, gb) =
                    binary_grads(gy, av, bv, |_, y| one / y, |x, y| -x / (y * y));
                self.accumulate(slots, *a, ga);
                self.accumulate(slots, *b, gb);
            }
            Op::Neg { x } => self.accumulate(slots, *x, gy.map(|v| -v)),
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(slots, *x, gy.map(|v| v * c));
            }
            Op::AddScalar { x } => self.accumulate(slots, *x, gy.clone()),
            Op::Tanh { x } => {
                let y = &node.value;
                let g = gy
                    .zip(y, |g, y| g * (F::one() - y * y))
                    .expect("shape preserved");
                self.accumulate(slots, *x, g);
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let g = gy
                    .zip(y, |g, y| g * y * (F::one() - y))
                    .expect("shape preserved");
                self.accumulate(slots, *x, g);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let z = F::zero();
                let g = gy
                    .zip(xv, |g, x| if x > z { g } else { z })
                    .expect("shape preserved");
                self.accumulate(slots, *x, g);
            }
            Op::Sqrt { x } => {
                let y = &node.value;
                let half = F::from_f64(0.5);
                let g = gy.zip(y, |g, y| g * half / y).expect("shape preserved");
                self.accumulate(slots, *x, g);
            }
            Op::MaxElem { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let z = F::zero();
                let mut ga = Tensor::zeros(av.shape().to_vec());
                let mut gb = Tensor::zeros(bv.shape().to_vec());
                for i in 0..gy.numel() {
                    let g = gy.data()[i];
                    if av.data()[i] >= bv.data()[i] {
                        ga.data_mut()[i] = g;
                        gb.data_mut()[i] = z;
                    } else {
                        gb.data_mut()[i] = g;
                    }
                }
                self.accumulate(slots, *a, ga);
                self.accumulate(slots, *b, gb);
            }
            Op::SoftmaxRows { x, valid } => {
                let y = &node.value;
                let cols = valid.len();
                let rows = y.numel() / cols;
                let mut gx = vec![F::zero(); y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &gy.data()[r * cols..(r + 1) * cols];
                    let mut dot = F::zero();
                    for j in 0..cols {
                        if valid[j] {
                            dot = dot + gr[j] * yr[j];
                        }
                    }
                    for j in 0..cols {
                        if valid[j] {
                            gx[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.accumulate(slots, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::CrossEntropySum {
                logits,
                targets,
                valid,
            } => {
                let lv = self.value(*logits);
                let (rows, vocab) = lv.dims2()?;
                let g = gy.scalar_value()?;
                let mut gl = vec![F::zero(); rows * vocab];
                for r in 0..rows {
                    if !valid[r] {
                        continue;
                    }
                    let row = lv.row_slice(r);
                    let lse = log_sum_exp(row);
                    for j in 0..vocab {
                        let p = (row[j] - lse).exp();
                        let ind = if j == targets[r] { F::one() } else { F::zero() };
                        gl[r * vocab + j] = g * (p - ind);
                    }
                }
                self.accumulate(slots, *logits, Tensor::new(vec![rows, vocab], gl)?);
            }
            Op::MaskedReduce {
                x,
                mask,
                kind,
                arg,
            } => {
                let xv = self.value(*x);
                let (t_len, d) = xv.dims2()?;
                let mut gx = vec![F::zero(); t_len * d];
                match kind {
                    ReduceKind::Mean => {
                        let count = mask.iter().filter(|&&m| m).count();
                        let inv = F::from_f64(1.0 / count as f64);
                        for (t, &m) in mask.iter().enumerate() {
                            if !m {
                                continue;
                            }
                            for j in 0..d {
                                gx[t * d + j] = gy.at1(j) * inv;
                            }
                        }
                    }
                    _ => {
                        for j in 0..d {
                            gx[arg[j] * d + j] = gy.at1(j);
                        }
                    }
                }
                self.accumulate(slots, *x, Tensor::new(vec![t_len, d], gx)?);
            }
            Op::Concat { parts, axis } => {
                let rank = node.value.rank();
                let mut offset = 0usize;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let extent = ps[*axis];
                    let g = match (rank, *axis) {
                        (1, 0) => Tensor::from_vec(gy.data()[offset..offset + extent].to_vec()),
                        (2, 0) => {
                            let cols = ps[1];
                            Tensor::new(
                                ps.clone(),
                                gy.data()[offset * cols..(offset + extent) * cols].to_vec(),
                            )?
                        }
                        (2, 1) => {
                            let rows = ps[0];
                            let mut data = Vec::with_capacity(rows * extent);
                            for r in 0..rows {
                                let row = gy.row_slice(r);
                                data.extend_from_slice(&row[offset..offset + extent]);
                            }
                            Tensor::new(ps.clone(), data)?
                        }
                        _ => unreachable!(),
                    };
                    self.accumulate(slots, p, g);
                    offset += extent;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                match (xv.rank(), *axis) {
                    (1, 0) => {
                        gx.data_mut()[*start..*start + *len].copy_from_slice(gy.data());
                    }
                    (2, 0) => {
                        let cols = xv.shape()[1];
                        gx.data_mut()[*start * cols..(*start + *len) * cols]
                            .copy_from_slice(gy.data());
                    }
                    (2, 1) => {
                        let cols = xv.shape()[1];
                        let rows = xv.shape()[0];
                        for r in 0..rows {
                            let src = gy.row_slice(r);
                            gx.data_mut()[r * cols + *start..r * cols + *start + *len]
                                .copy_from_slice(src);
                        }
                    }
                    _ => unreachable!(),
                }
                self.accumulate(slots, *x, gx);
            }
            Op::Row { x, index } => {
                let xv = self.value(*x);
                let (_, cols) = xv.dims2()?;
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                gx.data_mut()[*index * cols..(*index + 1) * cols].copy_from_slice(gy.data());
                self.accumulate(slots, *x, gx);
            }
            Op::StackRows { parts } => {
                let d = self.value(parts[0]).numel();
                for (i, &p) in parts.iter().enumerate() {
                    self.accumulate(
                        slots,
                        p,
                        Tensor::from_vec(gy.data()[i * d..(i + 1) * d].to_vec()),
                    );
                }
            }
            Op::GatherRows { table, ids, pad } => {
                let tv = self.value(*table);
                let (vocab, d) = tv.dims2()?;
                let mut gt = Tensor::zeros(vec![vocab, d]);
                for (i, &id) in ids.iter().enumerate() {
                    if id == *pad {
                        continue;
                    }
                    let src = gy.row_slice(i);
                    let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                    for j in 0..d {
                        dst[j] = dst[j] + src[j];
                    }
                }
                self.accumulate(slots, *table, gt);
            }
            Op::SumAll { x } => {
                let g = gy.scalar_value()?;
                let xv = self.value(*x);
                self.accumulate(slots, *x, Tensor::full(xv.shape().to_vec(), g));
            }
            Op::MeanAll { x } => {
                let xv = self.value(*x);
                let g = gy.scalar_value()? * F::from_f64(1.0 / xv.numel() as f64);
                self.accumulate(slots, *x, Tensor::full(xv.shape().to_vec(), g));
            }
        }
        Ok(())
    }
}

// ── value-level kernels ─────────────────────────────────────────────

fn row_width<F: Real>(t: &Tensor<F>) -> Result<usize> {
    match t.rank() {
        1 => t.dim1(),
        2 => Ok(t.shape()[1]),
        _ => Err(Error::Contract(format!(
            "expected rank 1 or 2, got shape {:?}",
            t.shape()
        ))),
    }
}

fn softmax_row<F: Real>(row: &[F], valid: &[bool], out: &mut [F]) {
    let mut mx = F::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if valid[j] && v > mx {
            mx = v;
        }
    }
    let mut sum = F::zero();
    for (j, &v) in row.iter().enumerate() {
        if valid[j] {
            let e = (v - mx).exp();
            out[j] = e;
            sum = sum + e;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if valid[j] {
            *o = *o / sum;
        }
    }
}

fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let mut mx = F::neg_infinity();
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = F::zero();
    for &v in row {
        sum = sum + (v - mx).exp();
    }
    mx + sum.ln()
}

pub(crate) fn matmul_vals<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = b.row_slice(p);
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `x · yᵀ` for x `[m,n]`, y `[k,n]` -> `[m,k]`.
fn matmul_nt<F: Real>(x: &Tensor<F>, y: &Tensor<F>) -> Tensor<F> {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let k = y.shape()[0];
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let xrow = x.row_slice(i);
        for p in 0..k {
            let yrow = y.row_slice(p);
            let mut s = F::zero();
            for j in 0..n {
                s = s + xrow[j] * yrow[j];
            }
            out[i * k + p] = s;
        }
    }
    Tensor::new(vec![m, k], out).expect("shape consistent")
}

/// `aᵀ · y` for a `[m,k]`, y `[m,n]` -> `[k,n]`.
fn matmul_tn<F: Real>(a: &Tensor<F>, y: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = y.shape()[1];
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        let yrow = y.row_slice(i);
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * yrow[j];
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("shape consistent")
}

fn transpose_vals<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, n) = x.dims2()?;
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = x.row_slice(i);
        for j in 0..n {
            out[j * m + i] = row[j];
        }
    }
    Tensor::new(vec![n, m], out)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = padded_dim(a, rank, i);
        let db = padded_dim(b, rank, i);
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn padded_dim(shape: &[usize], rank: usize, i: usize) -> usize {
    let offset = rank - shape.len();
    if i < offset {
        1
    } else {
        shape[i - offset]
    }
}

/// Right-aligned strides into `shape` for iteration over `out_shape`;
/// broadcast dimensions get stride 0.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut actual = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        actual[i] = acc;
        acc *= shape[i];
    }
    (0..rank)
        .map(|i| {
            if i < offset || (shape[i - offset] == 1 && out_shape[i] != 1) {
                0
            } else {
                actual[i - offset]
            }
        })
        .collect()
}

fn binary_broadcast<F: Real>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        return a.zip(b, f);
    }
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = bcast_strides(a.shape(), &out_shape);
    let sb = bcast_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let ia: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum();
        let ib: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum();
        data.push(f(a.data()[ia], b.data()[ib]));
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

/// Gradients of a broadcasting binary op: `da`/`db` give the local partial
/// at each element pair; broadcast axes are summed out by accumulation.
fn binary_grads<F: Real>(
    gy: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
    da: impl Fn(F, F) -> F,
    db: impl Fn(F, F) -> F,
) -> (Tensor<F>, Tensor<F>) {
    let out_shape = gy.shape();
    let sa = bcast_strides(a.shape(), out_shape);
    let sb = bcast_strides(b.shape(), out_shape);
    let rank = out_shape.len();
    let mut ga = Tensor::zeros_like_shape(a.shape());
    let mut gb = Tensor::zeros_like_shape(b.shape());
    let mut coords = vec![0usize; rank];
    for i in 0..gy.numel() {
        let ia: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum();
        let ib: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum();
        let (av, bv) = (a.data()[ia], b.data()[ib]);
        let g = gy.data()[i];
        ga.data_mut()[ia] = ga.data_mut()[ia] + g * da(av, bv);
        gb.data_mut()[ib] = gb.data_mut()[ib] + g * db(av, bv);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    (ga, gb)
}

/// Sum a gradient in the broadcast output shape back down to `target`.
fn reduce_to_shape<F: Real>(gy: &Tensor<F>, target: &[usize]) -> Tensor<F> {
    if gy.shape() == target {
        return gy.clone();
    }
    let out_shape = gy.shape();
    let st = bcast_strides(target, out_shape);
    let rank = out_shape.len();
    let mut out = Tensor::zeros_like_shape(target);
    let mut coords = vec![0usize; rank];
    for i in 0..gy.numel() {
        let it: usize = coords.iter().zip(&st).map(|(c, s)| c * s).sum();
        out.data_mut()[it] = out.data_mut()[it] + gy.data()[i];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

impl<F: Real> Tensor<F> {
    fn zeros_like_shape(shape: &[usize]) -> Tensor<F> {
        if shape.is_empty() {
            Tensor::scalar(F::zero())
        } else {
            Tensor::zeros(shape.to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_selects_row() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        let m = tape.constant(t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let out = tape.matmul(p, m).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::uniform(&mut rng, vec![3, 4], -2.0, 2.0);
        let b = Tensor::<f64>::uniform(&mut rng, vec![4, 2], -2.0, 2.0);
        // independent triple-loop oracle
        let mut expect = vec![0.0f64; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    expect[i * 2 + j] += a.at2(i, p) * b.at2(p, j);
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let an = tape.constant(a);
        let bn = tape.constant(b);
        let c = tape.matmul(an, bn).unwrap();
        for (got, want) in tape.value(c).data().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }
        let _ = rng.gen::<f64>();
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn softmax_symmetry_and_hand_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.vec_const(vec![0.0, 0.0]);
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let c = tape.vec_const(vec![7.3, 7.3, 7.3]);
        let yc = tape.softmax_rows(c).unwrap();
        for &v in tape.value(yc).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        // hand evaluation of exp/normalize for [1, 2]
        let h = tape.vec_const(vec![1.0, 2.0]);
        let yh = tape.softmax_rows(h).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(yh).at1(0) - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((tape.value(yh).at1(1) - e / (1.0 + e)).abs() < 1e-12);
        assert!((tape.value(yh).at1(0) - 0.26894).abs() < 1e-5);
        assert!((tape.value(yh).at1(1) - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn masked_softmax_zeroes_masked_positions_exactly() {
        let mut tape = Tape::<f64>::new();
        let x = tape.vec_const(vec![5.0, 100.0, 3.0]);
        let y = tape
            .masked_softmax_rows(x, &[true, false, true])
            .unwrap();
        let v = tape.value(y);
        assert_eq!(v.at1(1), 0.0);
        assert!((v.at1(0) + v.at1(2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_all_masked_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.vec_const(vec![1.0, 2.0]);
        assert!(matches!(
            tape.masked_softmax_rows(x, &[false, false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn masked_reduce_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[vec![1.0], vec![5.0], vec![3.0]]));
        let mx = tape
            .masked_reduce(x, &[true, true, true], ReduceKind::Max)
            .unwrap();
        assert_eq!(tape.value(mx).data(), &[5.0]);
        // hand reduction excluding the masked row
        let mx2 = tape
            .masked_reduce(x, &[true, false, true], ReduceKind::Max)
            .unwrap();
        assert_eq!(tape.value(mx2).data(), &[3.0]);

        let c = tape.constant(t2(&[vec![2.5, -1.0], vec![2.5, -1.0]]));
        for kind in [ReduceKind::Max, ReduceKind::Mean, ReduceKind::Min] {
            let r = tape.masked_reduce(c, &[true, true], kind).unwrap();
            assert_eq!(tape.value(r).data(), &[2.5, -1.0]);
        }
    }

    #[test]
    fn masked_reduce_empty_mask_is_empty_pool() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[vec![1.0], vec![2.0]]));
        assert!(matches!(
            tape.masked_reduce(x, &[false, false], ReduceKind::Mean),
            Err(Error::EmptyPool)
        ));
    }

    #[test]
    fn elementwise_trivial_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.vec_const(vec![-1.0, 0.0, 2.0]);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = tape.scalar_const(0.0);
        let th = tape.tanh(z).unwrap();
        let sg = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(th).scalar_value().unwrap(), 0.0);
        assert_eq!(tape.value(sg).scalar_value().unwrap(), 0.5);

        let a = tape.vec_const(vec![1.0, 2.0]);
        let b = tape.vec_const(vec![3.0]);
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn broadcast_row_vector_add() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let v = tape.vec_const(vec![10.0, 20.0]);
        let out = tape.add(m, v).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn backward_linear_gives_outer_product_pattern() {
        // loss = sum(W·x) with x fixed → dW[i][p] = x[p], exactly
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t2(&[vec![0.3, -0.2, 0.9], vec![1.0, 0.0, -0.5]]));
        let x = tape.vec_const(vec![2.0, -1.0, 4.0]);
        let y = tape.matvec(w, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        assert_eq!(gw.data(), &[2.0, -1.0, 4.0, 2.0, -1.0, 4.0]);
    }

    #[test]
    fn backward_quadratic_is_identity() {
        // loss = ½‖p‖² → grad = p exactly
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(vec![1.5, -2.0, 0.25]));
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_through_concat_splits_gradient_exactly() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![3.0]));
        let cat = tape.concat(&[a, b], 0).unwrap();
        let w = tape.vec_const(vec![2.0, 4.0, 8.0]);
        let prod = tape.mul(cat, w).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[8.0]);
    }

    #[test]
    fn unreachable_leaf_has_absent_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.leaf(Tensor::from_vec(vec![1.0]));
        let unused = tape.leaf(Tensor::from_vec(vec![9.0]));
        let loss = tape.sum_all(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(used).is_some());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn gradient_accumulates_across_multiple_uses() {
        // loss = sum(p) + sum(p) → grad = 2
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(vec![1.0, 1.0]));
        let s1 = tape.sum_all(p).unwrap();
        let s2 = tape.sum_all(p).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut tape = Tape::<f64>::new_checked();
        let a = tape.scalar_const(1.0);
        let b = tape.scalar_const(0.0);
        assert!(matches!(
            tape.div(a, b),
            Err(Error::NonFinite { op: "div" })
        ));
    }

    #[test]
    fn gather_zeroes_pad_and_selects_basis_rows() {
        let mut tape = Tape::<f64>::new();
        let table = tape.constant(t2(&[
            vec![9.0, 9.0, 9.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]));
        let out = tape.gather_rows(table, &[0, 2], 0).unwrap();
        assert_eq!(tape.value(out).row_slice(0), &[0.0, 0.0, 0.0]);
        assert_eq!(tape.value(out).row_slice(1), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let v = 7usize;
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![2, v]));
        let ce = tape
            .cross_entropy_sum(logits, &[3, 0], &[true, true])
            .unwrap();
        let per_tok = tape.value(ce).scalar_value().unwrap() / 2.0;
        assert!((per_tok - (v as f64).ln()).abs() < 1e-12);

        let mut big = Tensor::zeros(vec![1, v]);
        big.data_mut()[2] = 50.0;
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(big);
        let ce = tape.cross_entropy_sum(logits, &[2], &[true]).unwrap();
        assert!(tape.value(ce).scalar_value().unwrap() <= 1e-9);
    }

    #[test]
    fn max_elem_breaks_ties_toward_first_operand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(vec![2.0, 1.0]));
        let b = tape.leaf(Tensor::from_vec(vec![2.0, 5.0]));
        let m = tape.max_elem(a, b).unwrap();
        let loss = tape.sum_all(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 1.0]);
    }
}
