//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation eagerly: the forward value is computed
//! when the op is pushed, and [`Tape::backward`] walks the nodes in reverse to
//! accumulate gradients. Leaves are either trainable (`param`) or constants.
//! Nodes whose inputs are all constants never receive gradients, which is how
//! stop-gradient is expressed: wrap a value in [`Tape::constant`].

use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Ln,
    Sigmoid,
    Gelu,
    Softplus,
    Abs,
    Sqrt,
    Square,
    Relu,
    Recip,
    Sin,
    Cos,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f32> },
    L2NormRows { x: Var, norms: Vec<f32> },
    Sum(Var),
    RowSum(Var),
    ColSum(Var),
    RowArg { a: Var, arg: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    SigmoidFocal { logits: Var, targets: Tensor, alpha: f32, gamma: f32 },
    FocalCost { logits: Var, alpha: f64, gamma: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower clamp applied to probabilities before logarithms in the focal cost.
pub const PROB_EPS: f64 = 1e-8;

const NORM_EPS: f32 = 1e-12;
const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Matching-cost focal term for a probability `p`, evaluated in f64.
/// Returns `(pos - neg, d(pos - neg)/dp)`; the derivative is zero where the
/// clamp is active.
pub(crate) fn focal_cost_and_grad(p: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let clamped = p <= PROB_EPS || p >= 1.0 - PROB_EPS;
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q = 1.0 - p;
    let pos = alpha * q.powf(gamma) * (-p.ln());
    let neg = (1.0 - alpha) * p.powf(gamma) * (-q.ln());
    if clamped {
        return (pos - neg, 0.0);
    }
    let dpos = alpha * (-gamma * q.powf(gamma - 1.0) * (-p.ln()) - q.powf(gamma) / p);
    let dneg = (1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * (-q.ln()) + p.powf(gamma) / q);
    (pos - neg, dpos - dneg)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f32) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copies the current value into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(b).cols());
        let mut out = Tensor::zeros(m, n);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b, trans_b: false }, rg)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(b).rows());
        let mut out = Tensor::zeros(m, n);
        gemm(self.value(a), false, self.value(b), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b, trans_b: true }, rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    fn broadcast(&mut self, a: Var, b: Var, along_rows: bool, mul: bool) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let (m, n) = ta.shape();
        if along_rows {
            assert_eq!(tb.shape(), (1, n), "row broadcast shape");
        } else {
            assert_eq!(tb.shape(), (m, 1), "column broadcast shape");
        }
        let mut out = ta.clone();
        let bd = tb.data();
        for (i, chunk) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            for (j, x) in chunk.iter_mut().enumerate() {
                let y = if along_rows { bd[j] } else { bd[i] };
                if mul {
                    *x *= y;
                } else {
                    *x += y;
                }
            }
        }
        let op = match (along_rows, mul) {
            (true, false) => Op::AddRow(a, b),
            (true, true) => Op::MulRow(a, b),
            (false, false) => Op::AddCol(a, b),
            (false, true) => Op::MulCol(a, b),
        };
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    /// `a[m,n] + row[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.broadcast(a, row, true, false)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.broadcast(a, row, true, true)
    }

    /// `a[m,n] + col[m,1]` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        self.broadcast(a, col, false, false)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        self.broadcast(a, col, false, true)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn offset(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Offset(a), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f32) -> f32 = match kind {
            Unary::Exp => f32::exp,
            Unary::Ln => f32::ln,
            Unary::Sigmoid => sigmoid,
            Unary::Gelu => gelu,
            Unary::Softplus => softplus,
            Unary::Abs => f32::abs,
            Unary::Sqrt => f32::sqrt,
            Unary::Square => |x| x * x,
            Unary::Relu => |x| x.max(0.0),
            Unary::Recip => |x| 1.0 / x,
            Unary::Sin => f32::sin,
            Unary::Cos => f32::cos,
        };
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary(a, kind), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f32>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with affine `gain`/`bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (m, n) = tx.shape();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(g.len(), n);
        assert_eq!(b.len(), n);
        let mut xhat = Tensor::zeros(m, n);
        let mut out = Tensor::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let norm = (row.iter().map(|v| v * v).sum::<f32>() + NORM_EPS).sqrt();
            norms.push(norm);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2NormRows { x, norms }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f32)
    }

    /// `[m,n] -> [m,1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let out = Tensor::column(data);
        let rg = self.rg(&[a]);
        self.push(out, Op::RowSum(a), rg)
    }

    /// `[m,n] -> [1,n]`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (acc, v) in data.iter_mut().zip(t.row_slice(r)) {
                *acc += v;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::row(data), Op::ColSum(a), rg)
    }

    fn row_arg(&mut self, a: Var, take_max: bool) -> Var {
        let t = self.value(a);
        let mut arg = Vec::with_capacity(t.rows());
        let mut data = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                let better = if take_max { v > row[best] } else { v < row[best] };
                if better {
                    best = c;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::column(data), Op::RowArg { a, arg }, rg)
    }

    /// Row-wise maximum `[m,n] -> [m,1]`; ties resolve to the lowest column.
    pub fn row_max(&mut self, a: Var) -> Var {
        self.row_arg(a, true)
    }

    /// Row-wise minimum `[m,n] -> [m,1]`; ties resolve to the lowest column.
    pub fn row_min(&mut self, a: Var) -> Var {
        self.row_arg(a, false)
    }

    /// Picks `a[r, cols[r]]` per row: `[m,n] -> [m,1]`. The gradient of
    /// [`Tape::row_max`] with its winners fixed to `cols`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let t = self.value(a);
        assert!(cols.len() == t.rows() && cols.iter().all(|&c| c < t.cols()), "pick_cols out of range");
        let data = cols.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::column(data), Op::RowArg { a, arg: cols.to_vec() }, rg)
    }

    /// Column of each row's maximum; ties resolve to the lowest column.
    pub fn row_argmax(&self, a: Var) -> Vec<usize> {
        let t = self.value(a);
        (0..t.rows())
            .map(|r| {
                let row = t.row_slice(r);
                (1..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect()
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(idx.len(), n, data);
        let rg = self.rg(&[a]);
        self.push(out, Op::GatherRows { a, idx: idx.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(t.rows(), len, data);
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols { a, start }, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let n = t.cols();
        let out = Tensor::new(len, n, t.data()[start * n..(start + len) * n].to_vec());
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceRows { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(m, n);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), m, "concat_cols row mismatch");
            for r in 0..m {
                out.data_mut()[r * n + off..r * n + off + t.cols()].copy_from_slice(t.row_slice(r));
            }
            off += t.cols();
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), n, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
            m += t.rows();
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(m, n, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Summed sigmoid focal loss over all entries of `logits` against
    /// (soft) `targets` in `[0,1]`.
    pub fn sigmoid_focal_sum(&mut self, logits: Var, targets: Tensor, alpha: f32, gamma: f32) -> Var {
        let t = self.value(logits);
        assert_eq!(t.shape(), targets.shape(), "focal target shape");
        let mut total = 0.0f64;
        for (&x, &y) in t.data().iter().zip(targets.data()) {
            let p = sigmoid(x);
            let pos = alpha * y * (1.0 - p).powf(gamma) * softplus(-x);
            let neg = (1.0 - alpha) * (1.0 - y) * p.powf(gamma) * softplus(x);
            total += (pos + neg) as f64;
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total as f32),
            Op::SigmoidFocal { logits, targets, alpha, gamma },
            rg,
        )
    }

    /// Elementwise matching-cost focal term `pos(p) - neg(p)` with
    /// `p = sigmoid(logit)`.
    pub fn focal_cost(&mut self, logits: Var, alpha: f64, gamma: f64) -> Var {
        let out = self
            .value(logits)
            .map(|x| focal_cost_and_grad(sigmoid(x) as f64, alpha, gamma).0 as f32);
        let rg = self.rg(&[logits]);
        self.push(out, Op::FocalCost { logits, alpha, gamma }, rg)
    }

    /// Backward pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.backward_seeded(&[(root, Tensor::scalar(1.0))])
    }

    /// Backward pass from arbitrary upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape");
            accumulate(&mut grads, &self.nodes, *v, g);
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                if needs(a) {
                    // dA = G * B^T  (or G * B when C = A * B^T)
                    let mut da = Tensor::zeros(val(a).rows(), val(a).cols());
                    gemm(g, false, val(b), !trans_b, &mut da, 0.0);
                    accumulate(grads, nodes, a, &da);
                }
                if needs(b) {
                    let mut db = Tensor::zeros(val(b).rows(), val(b).cols());
                    if trans_b {
                        // dB = G^T * A
                        gemm(g, true, val(a), false, &mut db, 0.0);
                    } else {
                        gemm(val(a), true, g, false, &mut db, 0.0);
                    }
                    accumulate(grads, nodes, b, &db);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, g);
                accumulate(grads, nodes, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, *a, g);
                if needs(*b) {
                    accumulate(grads, nodes, *b, &g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, nodes, *a, &hadamard(g, val(*b)));
                }
                if needs(*b) {
                    accumulate(grads, nodes, *b, &hadamard(g, val(*a)));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if needs(*a) {
                    let d = zip3(g, tb, tb, |g, y, _| g / y);
                    accumulate(grads, nodes, *a, &d);
                }
                if needs(*b) {
                    let d = zip3(g, ta, tb, |g, x, y| -g * x / (y * y));
                    accumulate(grads, nodes, *b, &d);
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (ta, tb) = (val(*a), val(*b));
                let pick_a: Vec<bool> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| if is_min { x <= y } else { x >= y })
                    .collect();
                if needs(*a) {
                    let d = masked(g, &pick_a, true);
                    accumulate(grads, nodes, *a, &d);
                }
                if needs(*b) {
                    let d = masked(g, &pick_a, false);
                    accumulate(grads, nodes, *b, &d);
                }
            }
            Op::AddRow(a, row) => {
                accumulate(grads, nodes, *a, g);
                if needs(*row) {
                    accumulate(grads, nodes, *row, &col_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (val(*a), val(*row));
                let n = ta.cols();
                if needs(*a) {
                    let mut d = g.clone();
                    for (k, x) in d.data_mut().iter_mut().enumerate() {
                        *x *= tr.data()[k % n];
                    }
                    accumulate(grads, nodes, *a, &d);
                }
                if needs(*row) {
                    accumulate(grads, nodes, *row, &col_sums(&hadamard(g, ta)));
                }
            }
            Op::AddCol(a, col) => {
                accumulate(grads, nodes, *a, g);
                if needs(*col) {
                    accumulate(grads, nodes, *col, &row_sums(g));
                }
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (val(*a), val(*col));
                let n = ta.cols().max(1);
                if needs(*a) {
                    let mut d = g.clone();
                    for (k, x) in d.data_mut().iter_mut().enumerate() {
                        *x *= tc.data()[k / n];
                    }
                    accumulate(grads, nodes, *a, &d);
                }
                if needs(*col) {
                    accumulate(grads, nodes, *col, &row_sums(&hadamard(g, ta)));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, nodes, *a, &g.map(|x| x * s));
            }
            Op::Offset(a) => accumulate(grads, nodes, *a, g),
            Op::Unary(a, kind) => {
                let x = val(*a);
                let y = &node.value;
                let d = match kind {
                    Unary::Exp => zip3(g, y, y, |g, y, _| g * y),
                    Unary::Ln => zip3(g, x, x, |g, x, _| g / x),
                    Unary::Sigmoid => zip3(g, y, y, |g, y, _| g * y * (1.0 - y)),
                    Unary::Gelu => zip3(g, x, x, |g, x, _| g * gelu_grad(x)),
                    Unary::Softplus => zip3(g, x, x, |g, x, _| g * sigmoid(x)),
                    Unary::Abs => zip3(g, x, x, |g, x, _| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                    Unary::Sqrt => zip3(g, y, y, |g, y, _| g * 0.5 / y),
                    Unary::Square => zip3(g, x, x, |g, x, _| 2.0 * g * x),
                    Unary::Relu => zip3(g, x, x, |g, x, _| if x > 0.0 { g } else { 0.0 }),
                    Unary::Recip => zip3(g, y, y, |g, y, _| -g * y * y),
                    Unary::Sin => zip3(g, x, x, |g, x, _| g * x.cos()),
                    Unary::Cos => zip3(g, x, x, |g, x, _| -g * x.sin()),
                };
                accumulate(grads, nodes, *a, &d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols().max(1);
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        d.data_mut()[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, nodes, *a, &d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols().max(1);
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let gs: f32 = gr.iter().sum();
                    for c in 0..y.cols() {
                        d.data_mut()[r * n + c] = gr[c] - yr[c].exp() * gs;
                    }
                }
                accumulate(grads, nodes, *a, &d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (m, n) = xhat.shape();
                let gv = val(*gain).data();
                if needs(*gain) {
                    accumulate(grads, nodes, *gain, &col_sums(&hadamard(g, xhat)));
                }
                if needs(*bias) {
                    accumulate(grads, nodes, *bias, &col_sums(g));
                }
                if needs(*x) {
                    let mut d = Tensor::zeros(m, n);
                    for r in 0..m {
                        let (gr, hr) = (g.row_slice(r), xhat.row_slice(r));
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..n {
                            let dh = gr[c] * gv[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= n as f32;
                        m2 /= n as f32;
                        for c in 0..n {
                            let dh = gr[c] * gv[c];
                            d.data_mut()[r * n + c] = rstd[r] * (dh - m1 - hr[c] * m2);
                        }
                    }
                    accumulate(grads, nodes, *x, &d);
                }
            }
            Op::L2NormRows { x, norms } => {
                let y = &node.value;
                let n = y.cols().max(1);
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        d.data_mut()[r * n + c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                accumulate(grads, nodes, *x, &d);
            }
            Op::Sum(a) => {
                let t = val(*a);
                accumulate(grads, nodes, *a, &Tensor::full(t.rows(), t.cols(), g.item()));
            }
            Op::RowSum(a) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                let n = t.cols().max(1);
                for (k, x) in d.data_mut().iter_mut().enumerate() {
                    *x = g.data()[k / n];
                }
                accumulate(grads, nodes, *a, &d);
            }
            Op::ColSum(a) => {
                let t = val(*a);
                let n = t.cols().max(1);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for (k, x) in d.data_mut().iter_mut().enumerate() {
                    *x = g.data()[k % n];
                }
                accumulate(grads, nodes, *a, &d);
            }
            Op::RowArg { a, arg } => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for (r, &c) in arg.iter().enumerate() {
                    d.set(r, c, g.data()[r]);
                }
                accumulate(grads, nodes, *a, &d);
            }
            Op::GatherRows { a, idx } => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                let n = t.cols();
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        d.data_mut()[i * n + c] += g.data()[k * n + c];
                    }
                }
                accumulate(grads, nodes, *a, &d);
            }
            Op::SliceCols { a, start } => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                let len = g.cols();
                for r in 0..t.rows() {
                    for c in 0..len {
                        d.set(r, start + c, g.get(r, c));
                    }
                }
                accumulate(grads, nodes, *a, &d);
            }
            Op::SliceRows { a, start } => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                let n = t.cols();
                d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                accumulate(grads, nodes, *a, &d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = val(p);
                    if needs(p) {
                        let mut d = Tensor::zeros(t.rows(), t.cols());
                        for r in 0..t.rows() {
                            for c in 0..t.cols() {
                                d.set(r, c, g.get(r, off + c));
                            }
                        }
                        accumulate(grads, nodes, p, &d);
                    }
                    off += t.cols();
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut off = 0;
                for &p in parts {
                    let t = val(p);
                    if needs(p) {
                        let d = Tensor::new(
                            t.rows(),
                            t.cols(),
                            g.data()[off * n..(off + t.rows()) * n].to_vec(),
                        );
                        accumulate(grads, nodes, p, &d);
                    }
                    off += t.rows();
                }
            }
            Op::Transpose(a) => accumulate(grads, nodes, *a, &g.transpose()),
            Op::SigmoidFocal { logits, targets, alpha, gamma } => {
                let (alpha, gamma) = (*alpha, *gamma);
                let gs = g.item();
                let x = val(*logits);
                let data = x
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &y)| {
                        let p = sigmoid(x);
                        let q = 1.0 - p;
                        let dpos = alpha * y * q.powf(gamma) * (-gamma * p * softplus(-x) - q);
                        let dneg = (1.0 - alpha) * (1.0 - y) * p.powf(gamma) * (gamma * q * softplus(x) + p);
                        gs * (dpos + dneg)
                    })
                    .collect();
                accumulate(grads, nodes, *logits, &Tensor::new(x.rows(), x.cols(), data));
            }
            Op::FocalCost { logits, alpha, gamma } => {
                let x = val(*logits);
                let d = zip3(g, x, x, |g, x, _| {
                    let p = sigmoid(x) as f64;
                    let (_, dp) = focal_cost_and_grad(p, *alpha, *gamma);
                    (g as f64 * dp * p * (1.0 - p)) as f32
                });
                accumulate(grads, nodes, *logits, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: &Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip3(a, b, b, |x, y, _| x * y)
}

fn zip3(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.rows(), a.cols(), data)
}

fn masked(g: &Tensor, pick: &[bool], keep: bool) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(pick)
        .map(|(&x, &p)| if p == keep { x } else { 0.0 })
        .collect();
    Tensor::new(g.rows(), g.cols(), data)
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (acc, v) in out.iter_mut().zip(t.row_slice(r)) {
            *acc += v;
        }
    }
    Tensor::row(out)
}

fn row_sums(t: &Tensor) -> Tensor {
    Tensor::column((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
    }

    /// Central-difference check of `build` w.r.t. each input, in f64 via
    /// repeated f32 evaluation with a generous step.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let root = tape.sum(out);
        let grads = tape.backward(root);
        let eval = |inp: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inp.iter().map(|x| t.param(x.clone())).collect();
            let o = build(&mut t, &vs);
            t.value(o).data().iter().map(|&v| v as f64).sum()
        };
        let h = 1e-2f32;
        for (k, inp) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(inp.rows(), inp.cols()));
            for e in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
                let an = analytic.data()[e] as f64;
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-1);
                assert!(err < 2e-2, "input {k} elem {e}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn matmul_and_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let bt = rand_tensor(&mut rng, 5, 4);
        let row = rand_tensor(&mut rng, 1, 2);
        check(vec![a.clone(), b, row], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.mul_row(m, v[2]);
            t.add_row(m, v[2])
        });
        check(vec![a, bt], |t, v| {
            let m = t.matmul_nt(v[0], v[1]);
            t.square(m)
        });
    }

    #[test]
    fn normalization_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 3, 5);
        let g = rand_tensor(&mut rng, 1, 5);
        let b = rand_tensor(&mut rng, 1, 5);
        let w = rand_tensor(&mut rng, 3, 5);
        check(vec![x.clone(), g, b, w.clone()], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            t.mul(y, v[3])
        });
        check(vec![x.clone(), w.clone()], |t, v| {
            let y = t.l2_normalize_rows(v[0]);
            t.mul(y, v[1])
        });
        check(vec![x.clone(), w.clone()], |t, v| {
            let y = t.softmax_rows(v[0]);
            t.mul(y, v[1])
        });
        check(vec![x, w], |t, v| {
            let y = t.log_softmax_rows(v[0]);
            t.mul(y, v[1])
        });
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 2, 3);
        let y = rand_tensor(&mut rng, 2, 3).map(|v| v.abs() + 0.5);
        check(vec![x.clone(), y.clone()], |t, v| {
            let a = t.gelu(v[0]);
            let b = t.sigmoid(v[1]);
            let c = t.div(a, b);
            let d = t.softplus(c);
            let e = t.ln(v[1]);
            let f = t.sqrt(v[1]);
            let g = t.mul(e, f);
            let h = t.recip(v[1]);
            let i = t.add(d, g);
            let j = t.sub(i, h);
            let k = t.exp(j);
            t.scale(k, 0.3)
        });
        check(vec![x, y], |t, v| {
            let a = t.minimum(v[0], v[1]);
            let b = t.maximum(v[0], v[1]);
            let c = t.mul(a, b);
            let d = t.row_max(c);
            let e = t.row_min(v[0]);
            let f = t.add(d, e);
            let g = t.abs(v[0]);
            let h = t.row_sum(g);
            t.add(f, h)
        });
        check(vec![rand_tensor(&mut rng, 2, 3)], |t, v| {
            let a = t.scale(v[0], 3.0);
            let s = t.sin(a);
            let c = t.cos(v[0]);
            t.mul(s, c)
        });
    }

    #[test]
    fn structural_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 4, 3);
        let w = rand_tensor(&mut rng, 6, 2);
        let c = rand_tensor(&mut rng, 6, 1);
        check(vec![x, w, c], |t, v| {
            let g = t.gather_rows(v[0], &[3, 0, 0, 2, 1, 3]);
            let s = t.slice_cols(g, 1, 2);
            let a = t.concat_cols(&[s, v[1]]);
            let b = t.concat_rows(&[a, a]);
            let b = t.transpose(b);
            let b = t.transpose(b);
            let r = t.slice_rows(b, 2, 6);
            let r = t.mul_col(r, v[2]);
            let r = t.add_col(r, v[2]);
            let cs = t.col_sum(r);
            t.square(cs)
        });
    }

    #[test]
    fn pick_cols_matches_row_max_at_the_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, 5, 3);
        check(vec![x.clone()], |t, v| {
            let p = t.pick_cols(v[0], &[2, 0, 1, 1, 0]);
            t.square(p)
        });
        let mut t = Tape::new();
        let a = t.param(x);
        let cols = t.row_argmax(a);
        let m = t.row_max(a);
        let p = t.pick_cols(a, &cols);
        assert_eq!(t.value(m), t.value(p));
        let seed = Tensor::column(vec![1.0, -2.0, 0.5, 3.0, 1.5]);
        let gm = t.backward_seeded(&[(m, seed.clone())]);
        let gp = t.backward_seeded(&[(p, seed)]);
        assert_eq!(gm.get(a), gp.get(a));
    }

    #[test]
    fn focal_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 3, 4).map(|v| 3.0 * v);
        let targets = Tensor::new(3, 4, (0..12).map(|k| if k % 5 == 0 { 1.0 } else { 0.0 }).collect());
        check(vec![x.clone()], |t, v| t.sigmoid_focal_sum(v[0], targets.clone(), 0.25, 2.0));
        check(vec![x], |t, v| t.focal_cost(v[0], 0.25, 2.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let p = t.param(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(3.0));
        let d = t.detach(p);
        let a = t.mul(p, c);
        let b = t.mul(a, d);
        let g = t.backward(b);
        assert_eq!(g.get(p).unwrap().item(), 6.0);
        assert!(g.get(c).is_none());
        assert!(g.get(d).is_none());
    }
}
