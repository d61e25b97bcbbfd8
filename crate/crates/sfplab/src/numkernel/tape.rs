//! Reverse-mode gradient tape over matrix-valued nodes.
//!
//! A [`Tape`] records the primitive operations of one forward computation;
//! [`Tape::backprop`] replays them in reverse and accumulates exactly one
//! adjoint per recorded node. Tapes are single-use: the trainer builds a
//! fresh tape for every step, so nothing leaks between steps.
//!
//! The op set is fixed to what the model and losses compose — this is not
//! a general-purpose autodiff system.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::matrix::{gelu, gelu_grad, masked_softmax, rms_norm, Matrix, RMS_NORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    MulElem(NodeId, NodeId),
    Transpose(NodeId),
    MaskedSoftmax { scores: NodeId, mask: Matrix },
    RmsNorm { x: NodeId, gain: NodeId },
    Gelu(NodeId),
    GatherRows { src: NodeId, indices: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    SliceCols { src: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    Dropout { x: NodeId, mask: Matrix },
    RowNormalize(NodeId),
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Matrix,
    },
    Sum(NodeId),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input node (parameter or constant).
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul_elem(self.value(b))?;
        Ok(self.push(v, Op::MulElem(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn masked_softmax(&mut self, scores: NodeId, mask: Matrix) -> Result<NodeId> {
        let v = masked_softmax(self.value(scores), &mask)?;
        Ok(self.push(v, Op::MaskedSoftmax { scores, mask }))
    }

    /// `gain` must be a 1 x cols node.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let g = self.value(gain);
        if g.rows() != 1 {
            return Err(Error::Shape(format!(
                "rms_norm gain must be a row vector, got {}x{}",
                g.rows(),
                g.cols()
            )));
        }
        let v = rms_norm(self.value(x), g.row(0))?;
        Ok(self.push(v, Op::RmsNorm { x, gain }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn gather_rows(&mut self, src: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let s = self.value(src);
        let mut out = Matrix::zeros(indices.len(), s.cols());
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= s.rows() {
                return Err(Error::Input(format!(
                    "gather_rows: index {idx} out of range for {} rows",
                    s.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(s.row(idx));
        }
        Ok(self.push(out, Op::GatherRows { src, indices }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows: no parts".into()));
        }
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Matrix::zeros(total, cols);
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: {} cols vs {} cols",
                    v.cols(),
                    cols
                )));
            }
            for i in 0..v.rows() {
                out.row_mut(at + i).copy_from_slice(v.row(i));
            }
            at += v.rows();
        }
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(src);
        if start + len > s.cols() {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {}) out of {} columns",
                start + len,
                s.cols()
            )));
        }
        let mut out = Matrix::zeros(s.rows(), len);
        for i in 0..s.rows() {
            out.row_mut(i).copy_from_slice(&s.row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { src, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols: no parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: {} rows vs {} rows",
                    v.rows(),
                    rows
                )));
            }
            for i in 0..rows {
                out.row_mut(i)[at..at + v.cols()].copy_from_slice(v.row(i));
            }
            at += v.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Inverted dropout with a precomputed mask of 0 / (1/keep) entries.
    pub fn dropout(&mut self, x: NodeId, mask: Matrix) -> Result<NodeId> {
        let v = self.value(x).mul_elem(&mask)?;
        Ok(self.push(v, Op::Dropout { x, mask }))
    }

    /// L2-normalize each row. Errors on zero-norm rows.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for i in 0..v.rows() {
            let row = v.row(i);
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate(format!("zero-norm row {i}")));
            }
            for (o, &a) in out.row_mut(i).iter_mut().zip(row) {
                *o = a / norm;
            }
        }
        Ok(self.push(out, Op::RowNormalize(x)))
    }

    /// Mean cross-entropy over the rows flagged active: row i contributes
    /// -ln softmax(logits_i)[targets_i]. Natural log.
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        active: Vec<bool>,
    ) -> Result<NodeId> {
        let l = self.value(logits);
        if targets.len() != l.rows() || active.len() != l.rows() {
            return Err(Error::Shape(format!(
                "cross_entropy_rows: {} targets / {} flags vs {} rows",
                targets.len(),
                active.len(),
                l.rows()
            )));
        }
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(Error::Degenerate(
                "cross_entropy_rows: no active positions".into(),
            ));
        }
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut total = 0.0;
        for i in 0..l.rows() {
            let row = l.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs.set(i, j, e);
                sum += e;
            }
            for j in 0..l.cols() {
                probs.set(i, j, probs.get(i, j) / sum);
            }
            if active[i] {
                let t = targets[i];
                if t >= l.cols() {
                    return Err(Error::Input(format!(
                        "cross_entropy_rows: target {t} out of range for {} classes",
                        l.cols()
                    )));
                }
                total += -(probs.get(i, t).ln());
            }
        }
        let loss = Matrix::from_vec(1, 1, vec![total / count as f64])?;
        Ok(self.push(
            loss,
            Op::CrossEntropyRows {
                logits,
                targets,
                active,
                probs,
            },
        ))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(
            Matrix::from_vec(1, 1, vec![total]).expect("1x1"),
            Op::Sum(a),
        )
    }

    /// Replay the tape backward from a scalar loss node, producing one
    /// adjoint per reachable node.
    pub fn backprop(&self, loss: NodeId) -> Result<Adjoints> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backprop: loss node not on this tape".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backprop: loss must be 1x1, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }

        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.backward_node(idx, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Adjoints(adj))
    }

    fn backward_node(&self, idx: usize, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let acc = |adj: &mut [Option<Matrix>], id: NodeId, delta: Matrix| -> Result<()> {
            match &mut adj[id.0] {
                Some(existing) => existing.add_scaled_assign(&delta, 1.0),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(self.value(*b))?;
                let db = self.value(*a).matmul_tn(g)?;
                acc(adj, *a, da)?;
                acc(adj, *b, db)?;
            }
            Op::Add(a, b) => {
                acc(adj, *a, g.clone())?;
                acc(adj, *b, g.clone())?;
            }
            Op::Scale(a, c) => {
                acc(adj, *a, g.scale(*c))?;
            }
            Op::MulElem(a, b) => {
                acc(adj, *a, g.mul_elem(self.value(*b))?)?;
                acc(adj, *b, g.mul_elem(self.value(*a))?)?;
            }
            Op::Transpose(a) => {
                acc(adj, *a, g.transpose())?;
            }
            Op::MaskedSoftmax { scores, mask } => {
                let y = &self.nodes[idx].value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = (0..y.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..y.cols() {
                        if mask.get(i, j) == 0.0 {
                            da.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                }
                acc(adj, *scores, da)?;
            }
            Op::RmsNorm { x, gain } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (rows, cols) = xv.shape();
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgain = Matrix::zeros(1, cols);
                for i in 0..rows {
                    let row = xv.row(i);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                    let r = 1.0 / (ms + RMS_NORM_EPS).sqrt();
                    // s = sum_k g_ik * gain_k * x_ik
                    let mut s = 0.0;
                    for k in 0..cols {
                        s += g.get(i, k) * gv.get(0, k) * row[k];
                    }
                    let r3_over_d = r * r * r / cols as f64;
                    for j in 0..cols {
                        dx.set(
                            i,
                            j,
                            r * gv.get(0, j) * g.get(i, j) - r3_over_d * row[j] * s,
                        );
                        dgain.set(0, j, dgain.get(0, j) + g.get(i, j) * row[j] * r);
                    }
                }
                acc(adj, *x, dx)?;
                acc(adj, *gain, dgain)?;
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let da = Matrix::from_vec(
                    xv.rows(),
                    xv.cols(),
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gd)| gd * gelu_grad(x))
                        .collect(),
                )?;
                acc(adj, *a, da)?;
            }
            Op::GatherRows { src, indices } => {
                let sv = self.value(*src);
                let mut da = Matrix::zeros(sv.rows(), sv.cols());
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..sv.cols() {
                        da.set(idx, j, da.get(idx, j) + g.get(i, j));
                    }
                }
                acc(adj, *src, da)?;
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let mut dp = Matrix::zeros(rows, g.cols());
                    for i in 0..rows {
                        dp.row_mut(i).copy_from_slice(g.row(at + i));
                    }
                    at += rows;
                    acc(adj, p, dp)?;
                }
            }
            Op::SliceCols { src, start, len } => {
                let sv = self.value(*src);
                let mut da = Matrix::zeros(sv.rows(), sv.cols());
                for i in 0..sv.rows() {
                    da.row_mut(i)[*start..*start + *len].copy_from_slice(g.row(i));
                }
                acc(adj, *src, da)?;
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut dp = Matrix::zeros(g.rows(), cols);
                    for i in 0..g.rows() {
                        dp.row_mut(i).copy_from_slice(&g.row(i)[at..at + cols]);
                    }
                    at += cols;
                    acc(adj, p, dp)?;
                }
            }
            Op::Dropout { x, mask } => {
                acc(adj, *x, g.mul_elem(mask)?)?;
            }
            Op::RowNormalize(a) => {
                let xv = self.value(*a);
                let y = &self.nodes[idx].value;
                let mut da = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let norm = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = (0..xv.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..xv.cols() {
                        da.set(i, j, (g.get(i, j) - y.get(i, j) * dot) / norm);
                    }
                }
                acc(adj, *a, da)?;
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                active,
                probs,
            } => {
                let count = active.iter().filter(|&&a| a).count() as f64;
                let scale = g.get(0, 0) / count;
                let mut da = Matrix::zeros(probs.rows(), probs.cols());
                for i in 0..probs.rows() {
                    if !active[i] {
                        continue;
                    }
                    for j in 0..probs.cols() {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        da.set(i, j, scale * (probs.get(i, j) - onehot));
                    }
                }
                acc(adj, *logits, da)?;
            }
            Op::Sum(a) => {
                let sv = self.value(*a);
                let da = Matrix::from_vec(
                    sv.rows(),
                    sv.cols(),
                    vec![g.get(0, 0); sv.rows() * sv.cols()],
                )?;
                acc(adj, *a, da)?;
            }
        }
        Ok(())
    }
}

/// Adjoints produced by [`Tape::backprop`], indexed by node.
pub struct Adjoints(Vec<Option<Matrix>>);

impl Adjoints {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.0.get(id.0).and_then(|o| o.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.0.get_mut(id.0).and_then(|o| o.take())
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// 1/(1-rate). Deterministic per seed.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, seed: u64) -> Matrix {
    debug_assert!((0.0..1.0).contains(&rate));
    if rate == 0.0 {
        return Matrix::from_vec(rows, cols, vec![1.0; rows * cols]).expect("shape");
    }
    let keep = 1.0 - rate;
    let inv = 1.0 / keep;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            if rng.random_range(0.0..1.0) < rate {
                0.0
            } else {
                inv
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}
