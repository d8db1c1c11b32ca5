//! Reverse-mode differentiation over a linear tape of 2-D array operations.
//!
//! Every value is a row-major `rows × cols` matrix of `f64`. Operations are
//! appended in execution order; [`Tape::backward`] walks the tape in reverse
//! and accumulates vector-Jacobian products. Nodes that cannot reach a
//! trainable leaf are never visited in the backward pass.

use std::fmt;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn scalar() -> Self {
        Self { rows: 1, cols: 1 }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}×{}]", self.rows, self.cols)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Silu,
    Relu,
    Softplus,
    Abs,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    StopGradient,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Affine { x: Var, scale: f64 },
    MaxScalar { x: Var, floor: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
    LogSoftmax(Var),
    MixTokens { mix: Var, x: Var, tokens: usize },
}

struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss through a differentiable path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        let g = &self.grads[v.0];
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }
}

/// Linear operation record for reverse-mode differentiation.
///
/// `stop_gradient` values can be captured and replayed: a finite-difference
/// oracle that perturbs parameters may pin every stop-gradient input to its
/// unperturbed value, which is the configuration under which reverse-mode and
/// numeric derivatives are expected to agree.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    sg_capture: Vec<Vec<f64>>,
    sg_replay: Option<Vec<Vec<f64>>>,
    sg_cursor: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `stop_gradient` calls return `frozen[k]` for the k-th call.
    pub fn with_frozen_stop_gradients(frozen: Vec<Vec<f64>>) -> Self {
        Self { sg_replay: Some(frozen), ..Self::default() }
    }

    /// Values seen by every `stop_gradient` call so far, in call order.
    pub fn captured_stop_gradients(&self) -> &[Vec<f64>] {
        &self.sg_capture
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Vec<f64>, shape: Shape) -> Var {
        assert_eq!(value.len(), shape.len(), "leaf value does not match shape {shape}");
        self.push(shape, value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: Shape) -> Var {
        assert_eq!(value.len(), shape.len(), "constant value does not match shape {shape}");
        self.push(shape, value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value], Shape::scalar())
    }

    pub fn filled(&mut self, shape: Shape, value: f64) -> Var {
        self.constant(vec![value; shape.len()], shape)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a 1×1 node.
    pub fn item(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.shape, Shape::scalar(), "item() on non-scalar {}", n.shape);
        n.value[0]
    }

    /// Identity in the forward pass, zero in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let value = match &self.sg_replay {
            Some(frozen) => {
                let v = frozen
                    .get(self.sg_cursor)
                    .cloned()
                    .expect("frozen stop-gradient replay exhausted");
                assert_eq!(v.len(), shape.len(), "frozen stop-gradient value has the wrong size");
                v
            }
            None => self.value(x).to_vec(),
        };
        self.sg_cursor += 1;
        self.sg_capture.push(value.clone());
        self.push(shape, value, Op::StopGradient, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.cols, sb.rows, "matmul {sa} · {sb}");
        let mut out = vec![0.0; sa.rows * sb.cols];
        kernels::matmul(self.value(a), self.value(b), &mut out, sa.rows, sa.cols, sb.cols);
        let rg = self.rg(a) || self.rg(b);
        self.push(Shape::new(sa.rows, sb.cols), out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let v = self.value(x);
        let mut out = vec![0.0; s.len()];
        for i in 0..s.rows {
            for j in 0..s.cols {
                out[j * s.rows + i] = v[i * s.cols + j];
            }
        }
        let rg = self.rg(x);
        self.push(Shape::new(s.cols, s.rows), out, Op::Transpose(x), rg)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb)
            .unwrap_or_else(|| panic!("{kind:?}: incompatible shapes {sa} and {sb}"));
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let out = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(shape.len());
            for i in 0..shape.rows {
                for j in 0..shape.cols {
                    out.push(f(va[bidx(sa, i, j)], vb[bidx(sb, i, j)]));
                }
            }
            out
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, Op::Binary(kind, a, b), rg)
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Silu => |v| v * sigmoid(v),
            Unary::Relu => |v| v.max(0.0),
            Unary::Softplus => softplus,
            Unary::Abs => f64::abs,
            Unary::Square => |v| v * v,
            Unary::Sqrt => f64::sqrt,
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let (shape, rg) = (self.shape(x), self.rg(x));
        self.push(shape, out, Op::Unary(kind, x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    /// `scale·x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let out = self.value(x).iter().map(|&v| scale * v + offset).collect();
        let (shape, rg) = (self.shape(x), self.rg(x));
        self.push(shape, out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `max(floor, x)` elementwise; the gradient is zero wherever the floor is active.
    pub fn max_scalar(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(floor)).collect();
        let (shape, rg) = (self.shape(x), self.rg(x));
        self.push(shape, out, Op::MaxScalar { x, floor }, rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi);
        let out = self.value(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        let (shape, rg) = (self.shape(x), self.rg(x));
        self.push(shape, out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Sum of all elements → 1×1.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Shape::scalar(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.shape(x).len();
        assert!(n > 0, "mean of an empty array");
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums, reducing over rows: m×n → 1×n.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let v = self.value(x);
        let mut out = vec![0.0; s.cols];
        for row in v.chunks_exact(s.cols.max(1)).take(s.rows) {
            for (o, &r) in out.iter_mut().zip(row) {
                *o += r;
            }
        }
        let rg = self.rg(x);
        self.push(Shape::new(1, s.cols), out, Op::SumRows(x), rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let rows = self.shape(x).rows;
        let s = self.sum_rows(x);
        self.scale(s, 1.0 / rows as f64)
    }

    /// Row sums, reducing over columns: m×n → m×1.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = if s.cols == 0 {
            vec![0.0; s.rows]
        } else {
            self.value(x).chunks_exact(s.cols).map(|r| r.iter().sum()).collect()
        };
        let rg = self.rg(x);
        self.push(Shape::new(s.rows, 1), out, Op::SumCols(x), rg)
    }

    /// Horizontal concatenation of arrays with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.rows, rows, "concat_cols: row mismatch {s} vs {rows} rows");
            cols += s.cols;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.shape(p).cols;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Shape::new(rows, cols), out, Op::Concat(parts.to_vec()), rg)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x);
        assert!(start + len <= s.cols, "slice_cols {start}+{len} out of {s}");
        let v = self.value(x);
        let mut out = Vec::with_capacity(s.rows * len);
        for i in 0..s.rows {
            out.extend_from_slice(&v[i * s.cols + start..i * s.cols + start + len]);
        }
        let rg = self.rg(x);
        self.push(Shape::new(s.rows, len), out, Op::Slice { x, start }, rg)
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Shape) -> Var {
        assert_eq!(index.len(), shape.len(), "gather: index length vs shape {shape}");
        let v = self.value(x);
        let n = v.len();
        let out = index
            .iter()
            .map(|&i| {
                assert!(i < n, "gather index {i} out of {n}");
                v[i]
            })
            .collect();
        let rg = self.rg(x);
        self.push(shape, out, Op::Gather { x, index }, rg)
    }

    /// Rows of `x` in the order given by `rows`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let cols = self.shape(x).cols;
        let index = rows.iter().flat_map(|&r| (r * cols)..(r * cols + cols)).collect();
        self.gather(x, index, Shape::new(rows.len(), cols))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Var {
        assert_eq!(self.shape(x).len(), shape.len(), "reshape {} → {shape}", self.shape(x));
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Reshape(x), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(s.cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        self.push(s, out, Op::LogSoftmax(x), rg)
    }

    /// Block-diagonal token mixing: for each block of `tokens` rows of `x`,
    /// `out_b = mix · x_b` with `mix` of shape tokens×tokens.
    pub fn mix_tokens(&mut self, mix: Var, x: Var, tokens: usize) -> Var {
        let (sm, sx) = (self.shape(mix), self.shape(x));
        assert_eq!(sm, Shape::new(tokens, tokens), "mix_tokens: mixing matrix {sm}");
        assert_eq!(sx.rows % tokens, 0, "mix_tokens: {sx} not divisible into {tokens}-row blocks");
        let d = sx.cols;
        let mut out = vec![0.0; sx.len()];
        let (vm, vx) = (self.value(mix), self.value(x));
        for (ob, xb) in out.chunks_exact_mut(tokens * d).zip(vx.chunks_exact(tokens * d)) {
            kernels::matmul(vm, xb, ob, tokens, tokens, d);
        }
        let rg = self.rg(mix) || self.rg(x);
        self.push(sx, out, Op::MixTokens { mix, x, tokens }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), Shape::scalar(), "backward from a non-scalar");
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = vec![1.0];
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || grads[idx].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = g;
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Vec<f64>]) {
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.rg(*a) {
                    let ga = slot(grads, *a, sa.len());
                    kernels::matmul_bt_acc(g, self.value(*b), ga, sa.rows, sb.cols, sa.cols);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, sb.len());
                    kernels::matmul_at_acc(self.value(*a), g, gb, sa.rows, sa.cols, sb.cols);
                }
            }
            Op::Transpose(x) => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let gx = slot(grads, *x, s.len());
                    for i in 0..s.rows {
                        for j in 0..s.cols {
                            gx[i * s.cols + j] += g[j * s.rows + i];
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => self.backprop_binary(*kind, *a, *b, node.shape, g, grads),
            Op::Unary(kind, x) => {
                if !self.rg(*x) {
                    return;
                }
                let xv = self.value(*x);
                let yv = &node.value;
                let gx = slot(grads, *x, xv.len());
                macro_rules! each {
                    (|$x:ident, $y:ident| $d:expr) => {
                        for i in 0..gx.len() {
                            let ($x, $y) = (xv[i], yv[i]);
                            let _ = ($x, $y);
                            gx[i] += g[i] * $d;
                        }
                    };
                }
                match kind {
                    Unary::Exp => each!(|x, y| y),
                    Unary::Log => each!(|x, y| 1.0 / x),
                    Unary::Tanh => each!(|x, y| 1.0 - y * y),
                    Unary::Sigmoid => each!(|x, y| y * (1.0 - y)),
                    Unary::Silu => each!(|x, y| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    }),
                    Unary::Relu => each!(|x, y| if x > 0.0 { 1.0 } else { 0.0 }),
                    Unary::Softplus => each!(|x, y| sigmoid(x)),
                    Unary::Abs => each!(|x, y| if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }),
                    Unary::Square => each!(|x, y| 2.0 * x),
                    Unary::Sqrt => each!(|x, y| 0.5 / y),
                }
            }
            Op::Affine { x, scale } => {
                if self.rg(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += scale * gi;
                    }
                }
            }
            Op::MaxScalar { x, floor } => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let gx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        if xv[i] > *floor {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let gx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        if xv[i] > *lo && xv[i] < *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let n = self.shape(*x).len();
                    slot(grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SumRows(x) => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let gx = slot(grads, *x, s.len());
                    for row in gx.chunks_exact_mut(s.cols.max(1)).take(s.rows) {
                        for (o, &gi) in row.iter_mut().zip(g) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::SumCols(x) => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let gx = slot(grads, *x, s.len());
                    for (i, row) in gx.chunks_exact_mut(s.cols.max(1)).take(s.rows).enumerate() {
                        row.iter_mut().for_each(|o| *o += g[i]);
                    }
                }
            }
            Op::Concat(parts) => {
                let cols = node.shape.cols;
                let mut offset = 0;
                for &p in parts {
                    let sp = self.shape(p);
                    if self.rg(p) {
                        let gp = slot(grads, p, sp.len());
                        for i in 0..sp.rows {
                            let src = &g[i * cols + offset..i * cols + offset + sp.cols];
                            for (o, &gi) in gp[i * sp.cols..(i + 1) * sp.cols].iter_mut().zip(src) {
                                *o += gi;
                            }
                        }
                    }
                    offset += sp.cols;
                }
            }
            Op::Slice { x, start } => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let len = node.shape.cols;
                    let gx = slot(grads, *x, s.len());
                    for i in 0..s.rows {
                        let dst = &mut gx[i * s.cols + start..i * s.cols + start + len];
                        for (o, &gi) in dst.iter_mut().zip(&g[i * len..(i + 1) * len]) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if self.rg(*x) {
                    let n = self.shape(*x).len();
                    let gx = slot(grads, *x, n);
                    for (&i, &gi) in index.iter().zip(g) {
                        gx[i] += gi;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if self.rg(*x) {
                    let cols = node.shape.cols;
                    let y = &node.value;
                    let gx = slot(grads, *x, y.len());
                    for r in 0..node.shape.rows {
                        let span = r * cols..(r + 1) * cols;
                        let gsum: f64 = g[span.clone()].iter().sum();
                        for k in span {
                            gx[k] += g[k] - y[k].exp() * gsum;
                        }
                    }
                }
            }
            Op::MixTokens { mix, x, tokens } => {
                let t = *tokens;
                let d = node.shape.cols;
                let block = t * d;
                if self.rg(*mix) {
                    let xv = self.value(*x);
                    let gm = slot(grads, *mix, t * t);
                    for (gb, xb) in g.chunks_exact(block).zip(xv.chunks_exact(block)) {
                        kernels::matmul_bt_acc(gb, xb, gm, t, d, t);
                    }
                }
                if self.rg(*x) {
                    let mv = self.value(*mix);
                    let gx = slot(grads, *x, node.shape.len());
                    for (gxb, gb) in gx.chunks_exact_mut(block).zip(g.chunks_exact(block)) {
                        kernels::matmul_at_acc(mv, gb, gxb, t, t, d);
                    }
                }
            }
        }
    }

    fn backprop_binary(
        &self,
        kind: Binary,
        a: Var,
        b: Var,
        out: Shape,
        g: &[f64],
        grads: &mut [Vec<f64>],
    ) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        for (this, other, sign_b) in [(a, b, false), (b, a, true)] {
            if !self.rg(this) {
                continue;
            }
            let (st, so) = (self.shape(this), self.shape(other));
            let ov = self.value(other);
            let gt = slot(grads, this, st.len());
            let fast = sa == sb;
            for i in 0..out.rows {
                for j in 0..out.cols {
                    let k = i * out.cols + j;
                    let local = match kind {
                        Binary::Add => 1.0,
                        Binary::Sub => {
                            if sign_b {
                                -1.0
                            } else {
                                1.0
                            }
                        }
                        Binary::Mul => {
                            if fast {
                                ov[k]
                            } else {
                                ov[bidx(so, i, j)]
                            }
                        }
                    };
                    let t = if fast { k } else { bidx(st, i, j) };
                    gt[t] += g[k] * local;
                }
            }
        }
    }
}

fn slot(grads: &mut [Vec<f64>], v: Var, len: usize) -> &mut [f64] {
    let g = &mut grads[v.0];
    if g.is_empty() {
        *g = vec![0.0; len];
    }
    g
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some(Shape::new(dim(a.rows, b.rows)?, dim(a.cols, b.cols)?))
}

#[inline]
fn bidx(s: Shape, i: usize, j: usize) -> usize {
    let r = if s.rows == 1 { 0 } else { i };
    let c = if s.cols == 1 { 0 } else { j };
    r * s.cols + c
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Dense kernels over row-major slices.
pub mod kernels {
    /// `c = a·b` with a: m×k, b: k×n.
    pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        c.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    }

    /// `ga += g·bᵀ` with g: m×n, b: k×n, ga: m×k.
    pub fn matmul_bt_acc(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, n: usize, k: usize) {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let mut s = 0.0;
                for (&x, &y) in grow.iter().zip(brow) {
                    s += x * y;
                }
                ga[i * k + p] += s;
            }
        }
    }

    /// `gb += aᵀ·g` with a: m×k, g: m×n, gb: k×n.
    pub fn matmul_at_acc(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let gbrow = &mut gb[p * n..(p + 1) * n];
                for (o, &gv) in gbrow.iter_mut().zip(grow) {
                    *o += aip * gv;
                }
            }
        }
    }
}
