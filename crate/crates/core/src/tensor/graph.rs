//! Reverse-mode autodiff tape over [`Mat`].
//!
//! Forward values are computed eagerly as nodes are pushed; `backward` walks
//! the tape in reverse creation order (a topological order by construction)
//! and accumulates gradients into every node that requires them. The op set
//! is deliberately small; anything composite (cosine similarity, attention,
//! GRU cells) is assembled from these primitives so each backward rule stays
//! independently checkable against finite differences.

use super::matrix::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `b` is broadcast: 1xC row, Rx1 column, or 1x1 scalar.
    AddB(NodeId, NodeId),
    MulB(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Recip(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    SumAll(NodeId),
    RowSum(NodeId),
    MeanRows(NodeId),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSumExpRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Unfold {
        x: NodeId,
        kernel: usize,
        stride: usize,
    },
    DepthwiseConvSame {
        x: NodeId,
        w: NodeId,
    },
    ReplaceRows {
        x: NodeId,
        rows: Vec<usize>,
        emb: NodeId,
    },
    /// Forward takes an externally supplied value; backward routes the
    /// incoming gradient unchanged to `soft`.
    StraightThrough {
        soft: NodeId,
    },
    Element(NodeId, usize, usize),
    AddN(Vec<NodeId>),
}

struct Node {
    value: Mat,
    grad: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn broadcast_apply(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let (r, c) = a.shape();
    let mut out = Mat::zeros(r, c);
    match b.shape() {
        (1, 1) => {
            let s = b.scalar_value();
            for i in 0..r {
                for j in 0..c {
                    out.set(i, j, f(a.at(i, j), s));
                }
            }
        }
        (1, bc) => {
            assert_eq!(bc, c, "row broadcast width mismatch");
            for i in 0..r {
                for j in 0..c {
                    out.set(i, j, f(a.at(i, j), b.at(0, j)));
                }
            }
        }
        (br, 1) => {
            assert_eq!(br, r, "column broadcast height mismatch");
            for i in 0..r {
                for j in 0..c {
                    out.set(i, j, f(a.at(i, j), b.at(i, 0)));
                }
            }
        }
        _ => panic!("broadcast operand must be 1x1, 1xC or Rx1"),
    }
    out
}

/// Reduce a full-shape gradient back onto a broadcast operand's shape.
fn broadcast_reduce(full: &Mat, target_shape: (usize, usize)) -> Mat {
    let (r, c) = full.shape();
    match target_shape {
        (1, 1) => Mat::scalar(full.data().iter().sum()),
        (1, tc) => {
            assert_eq!(tc, c);
            let mut out = Mat::zeros(1, c);
            for i in 0..r {
                for j in 0..c {
                    out.set(0, j, out.at(0, j) + full.at(i, j));
                }
            }
            out
        }
        (tr, 1) => {
            assert_eq!(tr, r);
            let mut out = Mat::zeros(r, 1);
            for i in 0..r {
                let s: f64 = full.row(i).iter().sum();
                out.set(i, 0, s);
            }
            out
        }
        _ => panic!("invalid broadcast target shape"),
    }
}

fn softmax_rows(x: &Mat) -> Mat {
    let (r, c) = x.shape();
    let mut out = Mat::zeros(r, c);
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..c {
            out.set(i, j, out.at(i, j) / sum);
        }
    }
    out
}

fn logsumexp_row(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Mat> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Trainable input (parameter or differentiable input tensor).
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn input(&mut self, value: Mat, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let (r, c) = self.value(a).shape();
        let mut v = Mat::zeros(r, c);
        for i in 0..r * c {
            v.data_mut()[i] = self.value(a).data()[i] - self.value(b).data()[i];
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let (r, c) = self.value(a).shape();
        let mut v = Mat::zeros(r, c);
        for i in 0..r * c {
            v.data_mut()[i] = self.value(a).data()[i] * self.value(b).data()[i];
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_apply(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddB(a, b), ng)
    }

    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_apply(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MulB(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a, k), ng)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / x);
        let ng = self.ng(a);
        self.push(v, Op::Recip(a), ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu_scalar);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Mat::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let v = Mat::col_vec((0..m.rows()).map(|r| m.row(r).iter().sum()).collect());
        let ng = self.ng(a);
        self.push(v, Op::RowSum(a), ng)
    }

    /// Mean over all rows -> 1xC.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let (r, c) = m.shape();
        assert!(r > 0, "mean_rows on empty matrix");
        let mut v = Mat::zeros(1, c);
        for i in 0..r {
            for j in 0..c {
                v.set(0, j, v.at(0, j) + m.at(i, j));
            }
        }
        v.scale_assign(1.0 / r as f64);
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        let m = self.value(a);
        let c = m.cols();
        let mut v = Mat::zeros(rows.len(), c);
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).copy_from_slice(m.row(r));
        }
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, rows), ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let m = self.value(a);
        assert!(r0 < r1 && r1 <= m.rows());
        let c = m.cols();
        let mut v = Mat::zeros(r1 - r0, c);
        for i in r0..r1 {
            v.row_mut(i - r0).copy_from_slice(m.row(i));
        }
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, r0, r1), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let m = self.value(a);
        assert!(c0 < c1 && c1 <= m.cols());
        let r = m.rows();
        let mut v = Mat::zeros(r, c1 - c0);
        for i in 0..r {
            for j in c0..c1 {
                v.set(i, j - c0, m.at(i, j));
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, c0, c1), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Mat::zeros(r, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), r, "concat_cols row mismatch");
            for i in 0..r {
                for j in 0..m.cols() {
                    v.set(i, off + j, m.at(i, j));
                }
            }
            off += m.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut v = Mat::zeros(total, c);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), c, "concat_rows col mismatch");
            for i in 0..m.rows() {
                v.row_mut(off + i).copy_from_slice(m.row(i));
            }
            off += m.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let (r, c) = m.shape();
        let mut v = Mat::zeros(r, c);
        for i in 0..r {
            let lse = logsumexp_row(m.row(i));
            for j in 0..c {
                v.set(i, j, m.at(i, j) - lse);
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let v = Mat::col_vec((0..m.rows()).map(|r| logsumexp_row(m.row(r))).collect());
        let ng = self.ng(a);
        self.push(v, Op::LogSumExpRows(a), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let m = self.value(x);
        let (r, c) = m.shape();
        assert_eq!(self.value(gamma).shape(), (1, c));
        assert_eq!(self.value(beta).shape(), (1, c));
        let mut v = Mat::zeros(r, c);
        for i in 0..r {
            let row = m.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let xh = (row[j] - mean) * rstd;
                v.set(i, j, self.value(gamma).at(0, j) * xh + self.value(beta).at(0, j));
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, eps }, ng)
    }

    /// Sliding windows over rows: x [T x C] -> [T_out x kernel*C] with
    /// T_out = floor((T - kernel)/stride) + 1.
    pub fn unfold(&mut self, x: NodeId, kernel: usize, stride: usize) -> NodeId {
        let m = self.value(x);
        let (t, c) = m.shape();
        assert!(kernel >= 1 && stride >= 1 && t >= kernel);
        let t_out = (t - kernel) / stride + 1;
        let mut v = Mat::zeros(t_out, kernel * c);
        for i in 0..t_out {
            for j in 0..kernel {
                let src = m.row(i * stride + j);
                v.row_mut(i)[j * c..(j + 1) * c].copy_from_slice(src);
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::Unfold { x, kernel, stride }, ng)
    }

    /// Per-channel 1-d convolution with same-length output. `w` is [k x C];
    /// left pad k/2, right pad k - 1 - k/2 (implicit zeros).
    pub fn depthwise_conv_same(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let m = self.value(x);
        let wm = self.value(w);
        let (t, c) = m.shape();
        let k = wm.rows();
        assert_eq!(wm.cols(), c, "kernel channel mismatch");
        let pad = k / 2;
        let mut v = Mat::zeros(t, c);
        for i in 0..t {
            for j in 0..k {
                let src = i as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                for ch in 0..c {
                    v.set(i, ch, v.at(i, ch) + m.at(src, ch) * wm.at(j, ch));
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(v, Op::DepthwiseConvSame { x, w }, ng)
    }

    /// Copy of `x` with the listed rows replaced by `emb` (a 1xC row).
    pub fn replace_rows(&mut self, x: NodeId, rows: Vec<usize>, emb: NodeId) -> NodeId {
        let m = self.value(x);
        let e = self.value(emb);
        assert_eq!(e.shape(), (1, m.cols()), "embedding width mismatch");
        let mut v = m.clone();
        for &r in &rows {
            assert!(r < m.rows(), "replace_rows index out of range");
            v.row_mut(r).copy_from_slice(e.row(0));
        }
        let ng = self.ng(x) || self.ng(emb);
        self.push(v, Op::ReplaceRows { x, rows, emb }, ng)
    }

    /// Straight-through estimator: `hard` is the forward value, gradients
    /// flow to `soft` unchanged. Shapes must match.
    pub fn straight_through(&mut self, hard: Mat, soft: NodeId) -> NodeId {
        assert_eq!(hard.shape(), self.value(soft).shape());
        let ng = self.ng(soft);
        self.push(hard, Op::StraightThrough { soft }, ng)
    }

    pub fn element(&mut self, a: NodeId, r: usize, c: usize) -> NodeId {
        let v = Mat::scalar(self.value(a).at(r, c));
        let ng = self.ng(a);
        self.push(v, Op::Element(a, r, c), ng)
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v.add_assign(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::AddN(parts.to_vec()), ng)
    }

    fn accumulate(&mut self, id: NodeId, contribution: Mat) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&contribution),
            None => node.grad = Some(contribution),
        }
    }

    /// Run reverse-mode accumulation from `loss` (must be 1x1). Gradients of
    /// earlier `backward` calls on the same graph are cleared first.
    pub fn backward(&mut self, loss: NodeId) {
        assert!(self.value(loss).is_scalar(), "backward needs a scalar loss");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match self.nodes[i].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            let contribs = self.op_backward(&op, i, &g);
            for (pid, m) in contribs {
                self.accumulate(pid, m);
            }
        }
    }

    fn op_backward(&self, op: &Op, node_idx: usize, g: &Mat) -> Vec<(NodeId, Mat)> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let out_val = &self.nodes[node_idx].value;
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose());
                let db = val(*a).transpose().matmul(g);
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (d, &bv) in da.data_mut().iter_mut().zip(val(*b).data()) {
                    *d *= bv;
                }
                let mut db = g.clone();
                for (d, &av) in db.data_mut().iter_mut().zip(val(*a).data()) {
                    *d *= av;
                }
                vec![(*a, da), (*b, db)]
            }
            Op::AddB(a, b) => {
                let db = broadcast_reduce(g, val(*b).shape());
                vec![(*a, g.clone()), (*b, db)]
            }
            Op::MulB(a, b) => {
                let da = broadcast_apply(g, val(*b), |x, y| x * y);
                let ga = {
                    let mut m = g.clone();
                    for (d, &av) in m.data_mut().iter_mut().zip(val(*a).data()) {
                        *d *= av;
                    }
                    m
                };
                let db = broadcast_reduce(&ga, val(*b).shape());
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, k) => vec![(*a, g.map(|x| x * k))],
            Op::AddConst(a, _) => vec![(*a, g.clone())],
            Op::Recip(a) => {
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(out_val.data()) {
                    *d *= -y * y;
                }
                vec![(*a, da)]
            }
            Op::Sqrt(a) => {
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(out_val.data()) {
                    *d *= 0.5 / y;
                }
                vec![(*a, da)]
            }
            Op::Square(a) => {
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(val(*a).data()) {
                    *d *= 2.0 * x;
                }
                vec![(*a, da)]
            }
            Op::Ln(a) => {
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(val(*a).data()) {
                    *d /= x;
                }
                vec![(*a, da)]
            }
            Op::Exp(a) => {
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(out_val.data()) {
                    *d *= y;
                }
                vec![(*a, da)]
            }
            Op::Tanh(a) => {
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(out_val.data()) {
                    *d *= 1.0 - y * y;
                }
                vec![(*a, da)]
            }
            Op::Sigmoid(a) => {
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(out_val.data()) {
                    *d *= y * (1.0 - y);
                }
                vec![(*a, da)]
            }
            Op::Relu(a) => {
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(val(*a).data()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![(*a, da)]
            }
            Op::Gelu(a) => {
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(val(*a).data()) {
                    *d *= gelu_grad_scalar(x);
                }
                vec![(*a, da)]
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                let s = g.scalar_value();
                vec![(*a, Mat::from_vec(r, c, vec![s; r * c]))]
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    let gv = g.at(i, 0);
                    for j in 0..c {
                        da.set(i, j, gv);
                    }
                }
                vec![(*a, da)]
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        da.set(i, j, g.at(0, j) / r as f64);
                    }
                }
                vec![(*a, da)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::GatherRows(a, rows) => {
                let (r, c) = val(*a).shape();
                let mut da = Mat::zeros(r, c);
                for (i, &src) in rows.iter().enumerate() {
                    for j in 0..c {
                        da.set(src, j, da.at(src, j) + g.at(i, j));
                    }
                }
                vec![(*a, da)]
            }
            Op::SliceRows(a, r0, _r1) => {
                let (r, c) = val(*a).shape();
                let mut da = Mat::zeros(r, c);
                for i in 0..g.rows() {
                    da.row_mut(r0 + i).copy_from_slice(g.row(i));
                }
                vec![(*a, da)]
            }
            Op::SliceCols(a, c0, _c1) => {
                let (r, c) = val(*a).shape();
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    for j in 0..g.cols() {
                        da.set(i, c0 + j, g.at(i, j));
                    }
                }
                vec![(*a, da)]
            }
            Op::ConcatCols(parts) => {
                let mut out = Vec::new();
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let mut dp = Mat::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            dp.set(i, j, g.at(i, off + j));
                        }
                    }
                    off += c;
                    out.push((p, dp));
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::new();
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let mut dp = Mat::zeros(r, c);
                    for i in 0..r {
                        dp.row_mut(i).copy_from_slice(&g.row(off + i)[..c]);
                    }
                    off += r;
                    out.push((p, dp));
                }
                out
            }
            Op::Softmax(a) => {
                let y = out_val;
                let (r, c) = y.shape();
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| g.at(i, j) * y.at(i, j)).sum();
                    for j in 0..c {
                        da.set(i, j, y.at(i, j) * (g.at(i, j) - dot));
                    }
                }
                vec![(*a, da)]
            }
            Op::LogSoftmax(a) => {
                let x = val(*a);
                let sm = softmax_rows(x);
                let (r, c) = x.shape();
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    let gs: f64 = g.row(i).iter().sum();
                    for j in 0..c {
                        da.set(i, j, g.at(i, j) - sm.at(i, j) * gs);
                    }
                }
                vec![(*a, da)]
            }
            Op::LogSumExpRows(a) => {
                let sm = softmax_rows(val(*a));
                let (r, c) = sm.shape();
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    let gv = g.at(i, 0);
                    for j in 0..c {
                        da.set(i, j, sm.at(i, j) * gv);
                    }
                }
                vec![(*a, da)]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xm = val(*x);
                let gm = val(*gamma);
                let (r, c) = xm.shape();
                let mut dx = Mat::zeros(r, c);
                let mut dgamma = Mat::zeros(1, c);
                let mut dbeta = Mat::zeros(1, c);
                for i in 0..r {
                    let row = xm.row(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> =
                        (0..c).map(|j| g.at(i, j) * gm.at(0, j)).collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        dx.set(i, j, rstd * (dxhat[j] - m1 - xhat[j] * m2));
                        dgamma.set(0, j, dgamma.at(0, j) + g.at(i, j) * xhat[j]);
                        dbeta.set(0, j, dbeta.at(0, j) + g.at(i, j));
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Unfold { x, kernel, stride } => {
                let (t, c) = val(*x).shape();
                let mut dx = Mat::zeros(t, c);
                for i in 0..g.rows() {
                    for j in 0..*kernel {
                        let dst = i * stride + j;
                        for ch in 0..c {
                            dx.set(dst, ch, dx.at(dst, ch) + g.at(i, j * c + ch));
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::DepthwiseConvSame { x, w } => {
                let xm = val(*x);
                let wm = val(*w);
                let (t, c) = xm.shape();
                let k = wm.rows();
                let pad = k / 2;
                let mut dx = Mat::zeros(t, c);
                let mut dw = Mat::zeros(k, c);
                for i in 0..t {
                    for j in 0..k {
                        let src = i as isize + j as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            dx.set(src, ch, dx.at(src, ch) + g.at(i, ch) * wm.at(j, ch));
                            dw.set(j, ch, dw.at(j, ch) + g.at(i, ch) * xm.at(src, ch));
                        }
                    }
                }
                vec![(*x, dx), (*w, dw)]
            }
            Op::ReplaceRows { x, rows, emb } => {
                let mut dx = g.clone();
                let c = dx.cols();
                let mut demb = Mat::zeros(1, c);
                for &r in rows {
                    for j in 0..c {
                        demb.set(0, j, demb.at(0, j) + dx.at(r, j));
                    }
                    dx.row_mut(r).fill(0.0);
                }
                vec![(*x, dx), (*emb, demb)]
            }
            Op::StraightThrough { soft } => vec![(*soft, g.clone())],
            Op::Element(a, r, c) => {
                let (ar, ac) = val(*a).shape();
                let mut da = Mat::zeros(ar, ac);
                da.set(*r, *c, g.scalar_value());
                vec![(*a, da)]
            }
            Op::AddN(parts) => parts.iter().map(|&p| (p, g.clone())).collect(),
        }
    }
}
