//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A forward pass records every operation on a [`Tape`]; [`Tape::backward`]
//! replays the records in reverse, accumulating vector-Jacobian products into
//! each node's gradient. Nodes are identified by index, so topological order
//! is guaranteed by construction: an operation can only reference nodes that
//! already exist.
//!
//! Leaves are trainable parameters. Constants (graph Laplacians, observation
//! masks, the input matrix itself) are recorded with `needs_grad = false` and
//! the backward pass skips them, so masks and Laplacians never receive
//! gradients.

use crate::error::{MgmcError, Result};
use crate::matrix::{sigmoid, Matrix};

/// Index of a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a: n x d plus a 1 x d bias added to every row.
    AddRowBroadcast(NodeId, NodeId),
    /// a: n x d scaled per row by an n x 1 column of weights.
    MulColBroadcast(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    FrobSq(NodeId),
    Trace(NodeId),
    RowSoftmax(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    /// Entrywise product with a fixed mask; the mask gets no gradient.
    HadamardConst(NodeId, Matrix),
    /// Fused log-softmax cross-entropy, averaged over the selected rows.
    /// `targets` rows are one-hot on the selected rows; others are ignored.
    MaskedCrossEntropy {
        logits: NodeId,
        targets: Matrix,
        rows: Vec<bool>,
        labeled: usize,
    },
}

struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation: values forward, gradients backward.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node { value, grad, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Register a trainable parameter.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Register a fixed input; backward never propagates into it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reset all gradients to zero so backward can run again.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = Matrix::zeros(node.value.rows(), node.value.cols());
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn binary_needs(&self, a: NodeId, b: NodeId) -> bool {
        self.needs(a) || self.needs(b)
    }

    // ── Recorded operations ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b), self.binary_needs(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), self.binary_needs(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), self.binary_needs(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), self.binary_needs(a, b)))
    }

    /// Add a 1 x d bias row to every row of an n x d matrix.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(MgmcError::Dimension(format!(
                "add_row_broadcast: bias {}x{} vs operand {}x{}",
                bv.rows(),
                bv.cols(),
                av.rows(),
                av.cols()
            )));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            for (x, b) in row.iter_mut().zip(bv.row(0)) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRowBroadcast(a, bias), self.binary_needs(a, bias)))
    }

    /// Scale row r of an n x d matrix by weights[r] (weights n x 1).
    pub fn mul_col_broadcast(&mut self, a: NodeId, weights: NodeId) -> Result<NodeId> {
        let (av, wv) = (self.value(a), self.value(weights));
        if wv.cols() != 1 || wv.rows() != av.rows() {
            return Err(MgmcError::Dimension(format!(
                "mul_col_broadcast: weights {}x{} vs operand {}x{}",
                wv.rows(),
                wv.cols(),
                av.rows(),
                av.cols()
            )));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            let w = wv.get(r, 0);
            for x in value.row_mut(r) {
                *x *= w;
            }
        }
        Ok(self.push(value, Op::MulColBroadcast(a, weights), self.binary_needs(a, weights)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), self.needs(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), self.needs(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(a), self.needs(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k), self.needs(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), self.needs(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let n = (v.rows() * v.cols()) as f64;
        let value = Matrix::scalar(v.sum() / n);
        self.push(value, Op::Mean(a), self.needs(a))
    }

    pub fn frobenius_sq(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).frobenius_sq());
        self.push(value, Op::FrobSq(a), self.needs(a))
    }

    pub fn trace(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Matrix::scalar(self.value(a).trace()?);
        Ok(self.push(value, Op::Trace(a), self.needs(a)))
    }

    /// Row-stochastic softmax with max subtraction per row.
    pub fn rowwise_softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut value = v.clone();
        for r in 0..value.rows() {
            softmax_row_in_place(value.row_mut(r));
        }
        self.push(value, Op::RowSoftmax(a), self.needs(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(value, Op::ConcatCols(a, b), self.binary_needs(a, b)))
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let value = self.value(a).slice_cols(from, to)?;
        Ok(self.push(value, Op::SliceCols(a, from, to), self.needs(a)))
    }

    /// Entrywise product with a fixed 0/1 (or arbitrary) mask. The mask is a
    /// plain value, not a node: no gradient ever flows into it.
    pub fn hadamard_const(&mut self, a: NodeId, mask: &Matrix) -> Result<NodeId> {
        let value = self.value(a).hadamard(mask)?;
        Ok(self.push(value, Op::HadamardConst(a, mask.clone()), self.needs(a)))
    }

    /// Mean cross-entropy over the rows where `rows` is true, with log-softmax
    /// fused for stability. `targets` must hold one-hot rows at the selected
    /// positions.
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &Matrix,
        rows: &[bool],
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if !lv.same_shape(targets) {
            return Err(MgmcError::Dimension(format!(
                "masked_cross_entropy: logits {}x{} vs targets {}x{}",
                lv.rows(),
                lv.cols(),
                targets.rows(),
                targets.cols()
            )));
        }
        if rows.len() != lv.rows() {
            return Err(MgmcError::Dimension(format!(
                "masked_cross_entropy: {} row flags for {} rows",
                rows.len(),
                lv.rows()
            )));
        }
        let labeled = rows.iter().filter(|&&b| b).count();
        if labeled == 0 {
            return Err(MgmcError::Contract(
                "masked_cross_entropy with zero labeled rows".into(),
            ));
        }
        let mut total = 0.0;
        for r in 0..lv.rows() {
            if !rows[r] {
                continue;
            }
            let lsm = log_softmax_row(lv.row(r));
            for (c, y) in targets.row(r).iter().enumerate() {
                if *y != 0.0 {
                    total -= y * lsm[c];
                }
            }
        }
        let value = Matrix::scalar(total / labeled as f64);
        Ok(self.push(
            value,
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.clone(),
                rows: rows.to_vec(),
                labeled,
            },
            self.needs(logits),
        ))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Propagate d(loss)/d(node) into every node reachable from `loss`.
    /// The loss must be scalar (1 x 1).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        {
            let shape = self.value(loss).shape();
            if shape != (1, 1) {
                return Err(MgmcError::Contract(format!(
                    "backward requires a scalar loss, got {}x{}",
                    shape.0, shape.1
                )));
            }
        }
        self.nodes[loss.0].grad = Matrix::scalar(1.0);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Take the op out so we can mutate parent grads freely.
            let op = self.nodes[i].op.clone();
            let grad = self.nodes[i].grad.clone();
            self.backward_op(&op, &grad)?;
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, delta: &Matrix) {
        if self.nodes[id.0].needs_grad {
            self.nodes[id.0].grad.axpy(1.0, delta);
        }
    }

    fn backward_op(&mut self, op: &Op, g: &Matrix) -> Result<()> {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    let d = g.matmul(&self.value(*b).transpose())?;
                    self.accum(*a, &d);
                }
                if self.needs(*b) {
                    let d = self.value(*a).transpose().matmul(g)?;
                    self.accum(*b, &d);
                }
            }
            Op::Add(a, b) => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Sub(a, b) => {
                self.accum(*a, g);
                if self.needs(*b) {
                    let d = g.scale(-1.0);
                    self.accum(*b, &d);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.hadamard(self.value(*b))?;
                    self.accum(*a, &d);
                }
                if self.needs(*b) {
                    let d = g.hadamard(self.value(*a))?;
                    self.accum(*b, &d);
                }
            }
            Op::AddRowBroadcast(a, bias) => {
                self.accum(*a, g);
                if self.needs(*bias) {
                    let mut d = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (c, v) in g.row(r).iter().enumerate() {
                            d.set(0, c, d.get(0, c) + v);
                        }
                    }
                    self.accum(*bias, &d);
                }
            }
            Op::MulColBroadcast(a, w) => {
                if self.needs(*a) {
                    let wv = self.value(*w);
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let k = wv.get(r, 0);
                        for x in d.row_mut(r) {
                            *x *= k;
                        }
                    }
                    self.accum(*a, &d);
                }
                if self.needs(*w) {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), 1);
                    for r in 0..av.rows() {
                        let s: f64 = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                        d.set(r, 0, s);
                    }
                    self.accum(*w, &d);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let s = self.value(*a).map(sigmoid);
                    let d = g.hadamard(&s.map(|v| v * (1.0 - v)))?;
                    self.accum(*a, &d);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let t = self.value(*a).map(f64::tanh);
                    let d = g.hadamard(&t.map(|v| 1.0 - v * v))?;
                    self.accum(*a, &d);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let d = g.hadamard(&x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?;
                    self.accum(*a, &d);
                }
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    let d = g.scale(*k);
                    self.accum(*a, &d);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let v = self.value(*a);
                    let d = Matrix::filled(v.rows(), v.cols(), g.scalar_value());
                    self.accum(*a, &d);
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let v = self.value(*a);
                    let n = (v.rows() * v.cols()) as f64;
                    let d = Matrix::filled(v.rows(), v.cols(), g.scalar_value() / n);
                    self.accum(*a, &d);
                }
            }
            Op::FrobSq(a) => {
                if self.needs(*a) {
                    let d = self.value(*a).scale(2.0 * g.scalar_value());
                    self.accum(*a, &d);
                }
            }
            Op::Trace(a) => {
                if self.needs(*a) {
                    let v = self.value(*a);
                    let mut d = Matrix::zeros(v.rows(), v.cols());
                    for i in 0..v.rows() {
                        d.set(i, i, g.scalar_value());
                    }
                    self.accum(*a, &d);
                }
            }
            Op::RowSoftmax(a) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let mut s = x.clone();
                    for r in 0..s.rows() {
                        softmax_row_in_place(s.row_mut(r));
                    }
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let dot: f64 = g.row(r).iter().zip(s.row(r)).map(|(x, y)| x * y).sum();
                        for c in 0..x.cols() {
                            d.set(r, c, s.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    self.accum(*a, &d);
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                if self.needs(*a) {
                    let d = g.slice_cols(0, ac)?;
                    self.accum(*a, &d);
                }
                if self.needs(*b) {
                    let d = g.slice_cols(ac, g.cols())?;
                    self.accum(*b, &d);
                }
            }
            Op::SliceCols(a, from, to) => {
                if self.needs(*a) {
                    let v = self.value(*a);
                    let mut d = Matrix::zeros(v.rows(), v.cols());
                    debug_assert_eq!(to - from, g.cols());
                    for r in 0..v.rows() {
                        for (c, val) in g.row(r).iter().enumerate() {
                            d.set(r, from + c, *val);
                        }
                    }
                    self.accum(*a, &d);
                }
            }
            Op::HadamardConst(a, mask) => {
                if self.needs(*a) {
                    let d = g.hadamard(mask)?;
                    self.accum(*a, &d);
                }
            }
            Op::MaskedCrossEntropy { logits, targets, rows, labeled } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let mut d = Matrix::zeros(lv.rows(), lv.cols());
                    let scale = g.scalar_value() / *labeled as f64;
                    for r in 0..lv.rows() {
                        if !rows[r] {
                            continue;
                        }
                        let sm = softmax_of(lv.row(r));
                        for c in 0..lv.cols() {
                            d.set(r, c, scale * (sm[c] - targets.get(r, c)));
                        }
                    }
                    self.accum(*logits, &d);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn softmax_of(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_row_in_place(&mut out);
    out
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - max - log_sum).collect()
}

// ── Gradient checking ──────────────────────────────────────────────────────

/// Result of checking one parameter matrix against central differences.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    /// Entries whose relative error exceeded the tolerance.
    pub flagged: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn all_within_tol(&self) -> bool {
        self.params.iter().all(|p| p.flagged == 0)
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `loss_fn` maps a parameter vector to (loss, per-parameter analytic
/// gradients) and must be deterministic; it is evaluated twice at the base
/// point to verify that. Relative error per entry is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(
    loss_fn: F,
    params: &[Matrix],
    names: &[&str],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if h <= 0.0 {
        return Err(MgmcError::Contract(format!("grad_check step must be > 0, got {h}")));
    }
    let (loss_a, grads) = loss_fn(params)?;
    let (loss_b, _) = loss_fn(params)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(MgmcError::Numeric(format!(
            "loss closure is not deterministic: {loss_a} vs {loss_b}"
        )));
    }
    if grads.len() != params.len() {
        return Err(MgmcError::Contract(format!(
            "closure returned {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }

    let mut report = GradCheckReport { params: Vec::new(), max_rel_err: 0.0 };
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, grad) in grads.iter().enumerate() {
        let name = names.get(pi).copied().unwrap_or("param").to_string();
        let n = params[pi].rows() * params[pi].cols();
        let mut check =
            ParamCheck { name, max_rel_err: 0.0, worst_index: 0, flagged: 0 };
        for idx in 0..n {
            let orig = work[pi].as_slice()[idx];
            work[pi].as_mut_slice()[idx] = orig + h;
            let (plus, _) = loss_fn(&work)?;
            work[pi].as_mut_slice()[idx] = orig - h;
            let (minus, _) = loss_fn(&work)?;
            work[pi].as_mut_slice()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grad.as_slice()[idx];
            let rel = (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = idx;
            }
            if rel > tol {
                check.flagged += 1;
            }
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.params.push(check);
    }
    Ok(report)
}
