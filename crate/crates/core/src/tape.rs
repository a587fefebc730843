//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! Each forward op appends a node holding its output; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the parameter
//! slots referenced by leaf nodes.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::matrix::{matmul, matmul_at_acc, matmul_bt, Matrix};

pub(crate) type NodeId = usize;

const LN_EPS: f64 = 1e-5;

/// Boolean attention mask, `true` where a query row may attend to a key column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    /// Row `i` may attend to columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    /// Rows and columns below `g` attend to each other; everything else is
    /// masked out.
    pub fn prefix(n: usize, g: usize) -> Self {
        Self::from_fn(n, n, |i, j| i < g && j < g)
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }
}

/// Softmax of each row restricted to allowed columns. Disallowed entries
/// are exactly 0. Rows with no allowed column are all zero when
/// `allow_empty`, otherwise an error.
pub(crate) fn masked_softmax(x: &Matrix, mask: &AttentionMask, allow_empty: bool) -> Result<Matrix> {
    if mask.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "mask {:?} vs scores {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let allowed = mask.row(i);
        let xr = x.row(i);
        let max = xr
            .iter()
            .zip(allowed)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if !allowed.contains(&true) {
            if allow_empty {
                continue;
            }
            return Err(Error::EmptyAttentionSupport { row: i });
        }
        let or = out.row_mut(i);
        let mut z = 0.0;
        for j in 0..xr.len() {
            if allowed[j] {
                let e = (xr[j] - max).exp();
                or[j] = e;
                z += e;
            }
        }
        for v in or.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

enum Op {
    Leaf { param: Option<usize> },
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    MaskedSoftmax(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub(crate) struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn owned(&mut self, value: Matrix, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn param(&mut self, index: usize, value: &'a Matrix) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf { param: Some(index) }, true)
    }

    pub fn constant_ref(&mut self, value: &'a Matrix) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf { param: None }, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.owned(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_bt(self.value(a), self.value(b));
        self.owned(v, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.owned(v, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let b = self.value(bias).row(0).to_vec();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.owned(v, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_in_place(s);
        self.owned(v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.max(0.0);
        }
        self.owned(v, Op::Relu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let g = self.value(gamma).row(0);
        let b = self.value(beta).row(0);
        let mut out = xhat.clone();
        for i in 0..rows {
            for ((o, gv), bv) in out.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        self.owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn masked_softmax(
        &mut self,
        x: NodeId,
        mask: &AttentionMask,
        allow_empty: bool,
    ) -> Result<NodeId> {
        let v = masked_softmax(self.value(x), mask, allow_empty)?;
        Ok(self.owned(v, Op::MaskedSoftmax(x), &[x]))
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        self.owned(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let xv = self.value(x);
        let mut v = Matrix::zeros(xv.rows(), width);
        for i in 0..xv.rows() {
            v.row_mut(i).copy_from_slice(&xv.row(i)[start..start + width]);
        }
        self.owned(v, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let r = self.value(p).row(i);
                v.row_mut(i)[off..off + r.len()].copy_from_slice(r);
                off += r.len();
            }
        }
        self.owned(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Sum over rows of `-log softmax(logits)[target]`, as a 1x1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            loss += log_z - row[t];
        }
        let v = Matrix::from_vec(1, 1, vec![loss]).expect("1x1");
        self.owned(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Backpropagates from the scalar node `root` and adds parameter
    /// gradients into `param_grads`.
    pub fn backward(&self, root: NodeId, param_grads: &mut [Matrix]) {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.value(root).shape();
        let mut seed = Matrix::zeros(r, c);
        seed.data_mut().fill(1.0);
        grads[root] = Some(seed);

        for id in (0..=root).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let send = |target: NodeId, g: Matrix, grads: &mut Vec<Option<Matrix>>| {
                if !self.nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        param_grads[*p].add_assign(&gy);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        send(*a, matmul_bt(&gy, self.value(*b)), &mut grads);
                    }
                    if self.nodes[*b].needs_grad {
                        let bv = self.value(*b);
                        let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                        matmul_at_acc(&mut gb, self.value(*a), &gy);
                        send(*b, gb, &mut grads);
                    }
                }
                Op::MatMulBt(a, b) => {
                    // y = a b^T: da = gy b, db = gy^T a
                    if self.nodes[*a].needs_grad {
                        send(*a, matmul(&gy, self.value(*b)), &mut grads);
                    }
                    if self.nodes[*b].needs_grad {
                        let bv = self.value(*b);
                        let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                        matmul_at_acc(&mut gb, &gy, self.value(*a));
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, gy.clone(), &mut grads);
                    send(*b, gy, &mut grads);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, gy.cols());
                    for i in 0..gy.rows() {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(gy.row(i)) {
                            *o += v;
                        }
                    }
                    send(*bias, gb, &mut grads);
                    send(*a, gy, &mut grads);
                }
                Op::Scale(a, s) => {
                    let mut g = gy;
                    g.scale_in_place(*s);
                    send(*a, g, &mut grads);
                }
                Op::Relu(a) => {
                    let mut g = gy;
                    for (gv, yv) in g.data_mut().iter_mut().zip(node.value.data()) {
                        if *yv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    send(*a, g, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gamma_v = self.value(*gamma).row(0);
                    let cols = gy.cols();
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(gy.rows(), cols);
                    let mut dxhat = vec![0.0; cols];
                    for i in 0..gy.rows() {
                        let gr = gy.row(i);
                        let xr = xhat.row(i);
                        for j in 0..cols {
                            dg.row_mut(0)[j] += gr[j] * xr[j];
                            db.row_mut(0)[j] += gr[j];
                            dxhat[j] = gr[j] * gamma_v[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx =
                            dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = rstd[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    send(*gamma, dg, &mut grads);
                    send(*beta, db, &mut grads);
                    send(*x, dx, &mut grads);
                }
                Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = gy.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(gy.row(i)) {
                            *o += v;
                        }
                    }
                    send(*table, gt, &mut grads);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..gy.rows() {
                        gx.row_mut(i)[*start..*start + gy.cols()].copy_from_slice(gy.row(i));
                    }
                    send(*x, gx, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Matrix::zeros(gy.rows(), w);
                        for i in 0..gy.rows() {
                            gp.row_mut(i).copy_from_slice(&gy.row(i)[off..off + w]);
                        }
                        off += w;
                        send(p, gp, &mut grads);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = gy.get(0, 0);
                    let mut g = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = g.row_mut(i);
                        row[t] -= 1.0;
                    }
                    g.scale_in_place(scale);
                    send(*logits, g, &mut grads);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_hand_values() {
        let x = m(&[vec![0.0, 3f64.ln()], vec![0.0, 0.0]]);
        let y = masked_softmax(&x, &AttentionMask::full(2, 2), false).unwrap();
        assert!((y.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((y.get(0, 1) - 0.75).abs() < 1e-15);
        assert_eq!(y.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn masked_entries_are_exactly_zero() {
        let x = m(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let y = masked_softmax(&x, &AttentionMask::prefix(2, 1).clone_wide(3), true).unwrap();
        assert_eq!(y.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(y.row(1), &[0.0, 0.0, 0.0]);
        let err = masked_softmax(&x, &AttentionMask::prefix(2, 1).clone_wide(3), false);
        assert!(matches!(err, Err(Error::EmptyAttentionSupport { row: 1 })));
    }

    impl AttentionMask {
        fn clone_wide(&self, cols: usize) -> Self {
            Self::from_fn(self.rows, cols, |i, j| j < self.cols && self.is_allowed(i, j))
        }
    }

    // Central differences on a small composite graph.
    #[test]
    fn backward_matches_finite_differences() {
        let w = m(&[vec![0.3, -0.2, 0.5], vec![0.1, 0.4, -0.3]]);
        let gamma = m(&[vec![1.1, 0.9, 1.3]]);
        let beta = m(&[vec![0.05, -0.1, 0.2]]);
        let table = m(&[vec![0.2, -0.4], vec![0.7, 0.1], vec![-0.3, 0.5]]);
        let mask = AttentionMask::causal(3);

        let run = |params: &[Matrix], grads: Option<&mut Vec<Matrix>>| -> f64 {
            let mut tape = Tape::new();
            let t = tape.param(0, &params[0]);
            let w = tape.param(1, &params[1]);
            let g = tape.param(2, &params[2]);
            let b = tape.param(3, &params[3]);
            let x = tape.gather(t, &[2, 0, 1]);
            let h = tape.matmul(x, w);
            let h = tape.layer_norm(h, g, b);
            let h = tape.relu(h);
            let s = tape.matmul_bt(h, h);
            let s = tape.scale(s, 0.7);
            let p = tape.masked_softmax(s, &mask, false).unwrap();
            let a = tape.slice_cols(h, 1, 2);
            let first = tape.slice_cols(h, 0, 1);
            let c = tape.concat_cols(&[a, first]);
            let z = tape.matmul(p, c);
            let z = tape.add_row(z, b);
            let z = tape.add(z, h);
            let loss = tape.cross_entropy(z, &[0, 2, 1]);
            if let Some(gr) = grads {
                tape.backward(loss, gr);
            }
            tape.value(loss).get(0, 0)
        };

        let params = vec![table, w, gamma, beta];
        let mut grads: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        run(&params, Some(&mut grads));
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for k in 0..p.data().len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= h;
                let fd = (run(&plus, None) - run(&minus, None)) / (2.0 * h);
                let an = grads[pi].data()[k];
                assert!(
                    (fd - an).abs() < 1e-7,
                    "param {pi}[{k}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }
}
