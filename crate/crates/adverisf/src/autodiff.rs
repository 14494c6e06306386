//! Reverse-mode differentiation over dense f64 arrays (rank <= 2, batch x features).
//!
//! A [`Graph`] is a flat arena of nodes built in topological order; every op
//! records its parents so [`Graph::backward`] can sweep the tape in reverse.
//! [`Graph::input_gradient_graph`] additionally materializes a backward pass
//! *as forward nodes*, so the gradient-norm penalty of the critic objective
//! can itself be differentiated with respect to the critic parameters.
//! LeakyReLU is piecewise linear, so its activation mask enters that sub-graph
//! as a constant and the construction stays exact.

use ndarray::Array2;
use std::sync::Arc;

use crate::error::AdvError;

/// Dense tensor storage. Scalars are 1x1.
pub type Tensor = Array2<f64>;

/// Row x column extents of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn of(t: &Tensor) -> Self {
        Shape { rows: t.nrows(), cols: t.ncols() }
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Value(pub(crate) usize);

impl Value {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// Primitive tag recorded per node. Parents are stored inline.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Concat(usize, usize),
    SliceCols(usize, usize, usize),
    PadCols(usize, usize, usize),
    LeakyRelu(usize, f64),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    RowL2Norm(usize),
    BroadcastScalar(usize, usize, usize),
    BroadcastRows(usize, usize),
    BroadcastCols(usize, usize),
    PermuteRows(usize, Arc<Vec<usize>>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice",
            Op::PadCols(..) => "pad_cols",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::RowL2Norm(..) => "row_l2_norm",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::PermuteRows(..) => "permute_rows",
        }
    }

    fn parents(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::Concat(a, b) => {
                [Some(a), Some(b)]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SliceCols(a, _, _)
            | Op::PadCols(a, _, _)
            | Op::LeakyRelu(a, _)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::RowL2Norm(a)
            | Op::BroadcastScalar(a, _, _)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _)
            | Op::PermuteRows(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    data: Tensor,
    op: Op,
    grad: Option<Tensor>,
}

/// One differentiable computation, built fresh per training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, lhs: Shape, rhs: Shape) -> AdvError {
    AdvError::ShapeMismatch { op: op.to_string(), lhs: lhs.to_string(), rhs: rhs.to_string() }
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

    pub fn shape(&self, v: Value) -> Shape {
        Shape::of(&self.nodes[v.0].data)
    }

    pub fn data(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].data
    }

    /// Gradient filled in by [`Graph::backward`], if this node was reached.
    pub fn grad(&self, v: Value) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op_name(&self, v: Value) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, data: Tensor, op: Op) -> Value {
        self.nodes.push(Node { data, op, grad: None });
        Value(self.nodes.len() - 1)
    }

    /// Inserts a leaf node. Used for parameters, inputs, and constants.
    pub fn leaf(&mut self, data: Tensor) -> Value {
        self.push(data, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Value {
        self.leaf(Tensor::from_elem((1, 1), x))
    }

    /// Overwrites a leaf's value, for re-running the forward pass in place.
    pub fn set_leaf(&mut self, v: Value, data: Tensor) -> Result<(), AdvError> {
        if !matches!(self.nodes[v.0].op, Op::Leaf) {
            return Err(AdvError::NotALeaf);
        }
        if Shape::of(&data) != self.shape(v) {
            return Err(shape_err("set_leaf", self.shape(v), Shape::of(&data)));
        }
        self.nodes[v.0].data = data;
        Ok(())
    }

    /// Recomputes every non-leaf node's forward value in topological order.
    pub fn recompute(&mut self) {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            self.nodes[i].data = self.eval(&op);
        }
    }

    fn eval(&self, op: &Op) -> Tensor {
        let d = |i: usize| &self.nodes[i].data;
        match *op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if d(b).nrows() == 1 && d(a).nrows() != 1 {
                    let bias = d(b).row(0).to_owned();
                    d(a) + &bias
                } else {
                    d(a) + d(b)
                }
            }
            Op::Sub(a, b) => d(a) - d(b),
            Op::Mul(a, b) => d(a) * d(b),
            Op::Scale(a, c) => d(a) * c,
            Op::Matmul(a, b) => d(a).dot(d(b)),
            Op::Transpose(a) => d(a).t().to_owned(),
            Op::Concat(a, b) => {
                let (ra, ca) = d(a).dim();
                let cb = d(b).ncols();
                let mut out = Tensor::zeros((ra, ca + cb));
                out.slice_mut(ndarray::s![.., ..ca]).assign(d(a));
                out.slice_mut(ndarray::s![.., ca..]).assign(d(b));
                out
            }
            Op::SliceCols(a, s, e) => d(a).slice(ndarray::s![.., s..e]).to_owned(),
            Op::PadCols(a, start, total) => {
                let (r, c) = d(a).dim();
                let mut out = Tensor::zeros((r, total));
                out.slice_mut(ndarray::s![.., start..start + c]).assign(d(a));
                out
            }
            Op::LeakyRelu(a, slope) => d(a).mapv(|x| if x >= 0.0 { x } else { slope * x }),
            Op::Square(a) => d(a).mapv(|x| x * x),
            Op::Sqrt(a) => d(a).mapv(f64::sqrt),
            Op::Exp(a) => d(a).mapv(f64::exp),
            Op::Log(a) => d(a).mapv(f64::ln),
            Op::Sigmoid(a) => d(a).mapv(|x| 1.0 / (1.0 + (-x).exp())),
            Op::Clamp(a, lo, hi) => d(a).mapv(|x| x.clamp(lo, hi)),
            Op::Sum(a) => Tensor::from_elem((1, 1), d(a).sum()),
            Op::Mean(a) => Tensor::from_elem((1, 1), d(a).sum() / d(a).len() as f64),
            Op::SumRows(a) => {
                let s = d(a).sum_axis(ndarray::Axis(0));
                s.insert_axis(ndarray::Axis(0))
            }
            Op::SumCols(a) => {
                let s = d(a).sum_axis(ndarray::Axis(1));
                s.insert_axis(ndarray::Axis(1))
            }
            Op::RowL2Norm(a) => {
                let x = d(a);
                let mut out = Tensor::zeros((x.nrows(), 1));
                for (i, row) in x.rows().into_iter().enumerate() {
                    out[[i, 0]] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                }
                out
            }
            Op::BroadcastScalar(a, r, c) => Tensor::from_elem((r, c), d(a)[[0, 0]]),
            Op::BroadcastRows(a, r) => {
                let row = d(a).row(0).to_owned();
                let mut out = Tensor::zeros((r, row.len()));
                for mut dst in out.rows_mut() {
                    dst.assign(&row);
                }
                out
            }
            Op::BroadcastCols(a, c) => {
                let col = d(a).column(0).to_owned();
                let mut out = Tensor::zeros((col.len(), c));
                for (i, mut dst) in out.rows_mut().into_iter().enumerate() {
                    dst.fill(col[i]);
                }
                out
            }
            Op::PermuteRows(a, ref perm) => {
                let x = d(a);
                let mut out = Tensor::zeros(x.dim());
                for (i, &src) in perm.iter().enumerate() {
                    out.row_mut(i).assign(&x.row(src));
                }
                out
            }
        }
    }

    fn binary(&mut self, op: Op, name: &str, want_eq: bool, a: Value, b: Value) -> Result<Value, AdvError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if want_eq && sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let data = self.eval(&op);
        Ok(self.push(data, op))
    }

    /// Elementwise addition; also accepts a 1 x cols right operand broadcast
    /// over rows (bias addition).
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, AdvError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = sb.rows == 1 && sa.rows != 1 && sa.cols == sb.cols;
        if sa != sb && !broadcast {
            return Err(shape_err("add", sa, sb));
        }
        let op = Op::Add(a.0, b.0);
        let data = self.eval(&op);
        Ok(self.push(data, op))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value, AdvError> {
        self.binary(Op::Sub(a.0, b.0), "sub", true, a, b)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, AdvError> {
        self.binary(Op::Mul(a.0, b.0), "mul", true, a, b)
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let op = Op::Scale(a.0, c);
        let data = self.eval(&op);
        self.push(data, op)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value, AdvError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(shape_err("matmul", sa, sb));
        }
        let op = Op::Matmul(a.0, b.0);
        let data = self.eval(&op);
        Ok(self.push(data, op))
    }

    pub fn transpose(&mut self, a: Value) -> Value {
        let op = Op::Transpose(a.0);
        let data = self.eval(&op);
        self.push(data, op)
    }

    /// Column-axis concatenation of two batches with equal row counts.
    pub fn concat(&mut self, a: Value, b: Value) -> Result<Value, AdvError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rows != sb.rows {
            return Err(shape_err("concat", sa, sb));
        }
        let op = Op::Concat(a.0, b.0);
        let data = self.eval(&op);
        Ok(self.push(data, op))
    }

    /// Columns `[start, end)` of `a`.
    pub fn slice_cols(&mut self, a: Value, start: usize, end: usize) -> Result<Value, AdvError> {
        let sa = self.shape(a);
        if start >= end || end > sa.cols {
            return Err(AdvError::ShapeMismatch {
                op: "slice".to_string(),
                lhs: sa.to_string(),
                rhs: format!("[{start}, {end})"),
            });
        }
        let op = Op::SliceCols(a.0, start, end);
        let data = self.eval(&op);
        Ok(self.push(data, op))
    }

    /// Embeds `a` at column offset `start` of a zero matrix with `total` columns.
    pub fn pad_cols(&mut self, a: Value, start: usize, total: usize) -> Result<Value, AdvError> {
        let sa = self.shape(a);
        if start + sa.cols > total {
            return Err(AdvError::ShapeMismatch {
                op: "pad_cols".to_string(),
                lhs: sa.to_string(),
                rhs: format!("offset {start} of {total}"),
            });
        }
        let op = Op::PadCols(a.0, start, total);
        let data = self.eval(&op);
        Ok(self.push(data, op))
    }

    /// LeakyReLU; the derivative at exactly 0 is the positive-side slope 1.
    pub fn leaky_relu(&mut self, a: Value, slope: f64) -> Value {
        let op = Op::LeakyRelu(a.0, slope);
        let data = self.eval(&op);
        self.push(data, op)
    }

    pub fn square(&mut self, a: Value) -> Value {
        let op = Op::Square(a.0);
        let data = self.eval(&op);
        self.push(data, op)
    }

    pub fn sqrt(&mut self, a: Value) -> Value {
        let op = Op::Sqrt(a.0);
        let data = self.eval(&op);
        self.push(data, op)
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let op = Op::Exp(a.0);
        let data = self.eval(&op);
        self.push(data, op)
    }

    pub fn log(&mut self, a: Value) -> Value {
        let op = Op::Log(a.0);
        let data = self.eval(&op);
        self.push(data, op)
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let op = Op::Sigmoid(a.0);
        let data = self.eval(&op);
        self.push(data, op)
    }

    /// Clamp to `[lo, hi]`; gradient passes through strictly inside the band.
    pub fn clamp(&mut self, a: Value, lo: f64, hi: f64) -> Value {
        let op = Op::Clamp(a.0, lo, hi);
        let data = self.eval(&op);
        self.push(data, op)
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let op = Op::Sum(a.0);
        let data = self.eval(&op);
        self.push(data, op)
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let op = Op::Mean(a.0);
        let data = self.eval(&op);
        self.push(data, op)
    }

    /// Column sums: r x c -> 1 x c.
    pub fn sum_rows(&mut self, a: Value) -> Value {
        let op = Op::SumRows(a.0);
        let data = self.eval(&op);
        self.push(data, op)
    }

    /// Row sums: r x c -> r x 1.
    pub fn sum_cols(&mut self, a: Value) -> Value {
        let op = Op::SumCols(a.0);
        let data = self.eval(&op);
        self.push(data, op)
    }

    /// Per-row Euclidean norm: r x c -> r x 1.
    pub fn row_l2_norm(&mut self, a: Value) -> Value {
        let op = Op::RowL2Norm(a.0);
        let data = self.eval(&op);
        self.push(data, op)
    }

    pub fn broadcast_scalar(&mut self, a: Value, rows: usize, cols: usize) -> Result<Value, AdvError> {
        if !self.shape(a).is_scalar() {
            return Err(shape_err("broadcast_scalar", self.shape(a), Shape::new(1, 1)));
        }
        let op = Op::BroadcastScalar(a.0, rows, cols);
        let data = self.eval(&op);
        Ok(self.push(data, op))
    }

    /// 1 x c -> rows x c.
    pub fn broadcast_rows(&mut self, a: Value, rows: usize) -> Result<Value, AdvError> {
        if self.shape(a).rows != 1 {
            return Err(shape_err("broadcast_rows", self.shape(a), Shape::new(1, self.shape(a).cols)));
        }
        let op = Op::BroadcastRows(a.0, rows);
        let data = self.eval(&op);
        Ok(self.push(data, op))
    }

    /// r x 1 -> r x cols.
    pub fn broadcast_cols(&mut self, a: Value, cols: usize) -> Result<Value, AdvError> {
        if self.shape(a).cols != 1 {
            return Err(shape_err("broadcast_cols", self.shape(a), Shape::new(self.shape(a).rows, 1)));
        }
        let op = Op::BroadcastCols(a.0, cols);
        let data = self.eval(&op);
        Ok(self.push(data, op))
    }

    /// Row reordering by a permutation; gradients route back to the source rows.
    pub fn permute_rows(&mut self, a: Value, perm: &[usize]) -> Result<Value, AdvError> {
        let rows = self.shape(a).rows;
        let mut seen = vec![false; rows];
        if perm.len() != rows {
            return Err(AdvError::InvalidPermutation(format!(
                "length {} for {} rows",
                perm.len(),
                rows
            )));
        }
        for &p in perm {
            if p >= rows || seen[p] {
                return Err(AdvError::InvalidPermutation(format!("index {p} repeated or out of range")));
            }
            seen[p] = true;
        }
        let op = Op::PermuteRows(a.0, Arc::new(perm.to_vec()));
        let data = self.eval(&op);
        Ok(self.push(data, op))
    }

    /// Reverse sweep from a scalar root; fills `grad` on every reachable node.
    pub fn backward(&mut self, root: Value) -> Result<(), AdvError> {
        if !self.shape(root).is_scalar() {
            return Err(AdvError::NonScalarRoot(self.shape(root).to_string()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.clone() else { continue };
            let op = self.nodes[i].op.clone();
            self.accumulate_vjp(i, &op, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, node: usize, contrib: Tensor) {
        match &mut self.nodes[node].grad {
            Some(g) => *g += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_vjp(&mut self, out: usize, op: &Op, g: &Tensor) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(a, g.clone());
                let gb = if self.nodes[b].data.nrows() == 1 && g.nrows() != 1 {
                    g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0))
                } else {
                    g.clone()
                };
                self.add_grad(b, gb);
            }
            Op::Sub(a, b) => {
                self.add_grad(a, g.clone());
                self.add_grad(b, -g);
            }
            Op::Mul(a, b) => {
                let ga = g * &self.nodes[b].data;
                let gb = g * &self.nodes[a].data;
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::Scale(a, c) => self.add_grad(a, g * c),
            Op::Matmul(a, b) => {
                let ga = g.dot(&self.nodes[b].data.t());
                let gb = self.nodes[a].data.t().dot(g);
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::Transpose(a) => self.add_grad(a, g.t().to_owned()),
            Op::Concat(a, b) => {
                let ca = self.nodes[a].data.ncols();
                self.add_grad(a, g.slice(ndarray::s![.., ..ca]).to_owned());
                self.add_grad(b, g.slice(ndarray::s![.., ca..]).to_owned());
            }
            Op::SliceCols(a, s, _e) => {
                let (r, c) = self.nodes[a].data.dim();
                let mut ga = Tensor::zeros((r, c));
                ga.slice_mut(ndarray::s![.., s..s + g.ncols()]).assign(g);
                self.add_grad(a, ga);
            }
            Op::PadCols(a, start, _total) => {
                let c = self.nodes[a].data.ncols();
                self.add_grad(a, g.slice(ndarray::s![.., start..start + c]).to_owned());
            }
            Op::LeakyRelu(a, slope) => {
                let mask = self.nodes[a].data.mapv(|x| if x >= 0.0 { 1.0 } else { slope });
                self.add_grad(a, g * &mask);
            }
            Op::Square(a) => {
                let ga = 2.0 * g * &self.nodes[a].data;
                self.add_grad(a, ga);
            }
            Op::Sqrt(a) => {
                let ga = g * &self.nodes[out].data.mapv(|y| 0.5 / y);
                self.add_grad(a, ga);
            }
            Op::Exp(a) => {
                let ga = g * &self.nodes[out].data;
                self.add_grad(a, ga);
            }
            Op::Log(a) => {
                let ga = g / &self.nodes[a].data;
                self.add_grad(a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g * &self.nodes[out].data.mapv(|s| s * (1.0 - s));
                self.add_grad(a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let mask = self.nodes[a].data.mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                self.add_grad(a, g * &mask);
            }
            Op::Sum(a) => {
                let s = self.nodes[a].data.dim();
                self.add_grad(a, Tensor::from_elem(s, g[[0, 0]]));
            }
            Op::Mean(a) => {
                let s = self.nodes[a].data.dim();
                let n = (s.0 * s.1) as f64;
                self.add_grad(a, Tensor::from_elem(s, g[[0, 0]] / n));
            }
            Op::SumRows(a) => {
                let rows = self.nodes[a].data.nrows();
                let mut ga = Tensor::zeros(self.nodes[a].data.dim());
                for mut row in ga.rows_mut() {
                    row.assign(&g.row(0));
                }
                let _ = rows;
                self.add_grad(a, ga);
            }
            Op::SumCols(a) => {
                let mut ga = Tensor::zeros(self.nodes[a].data.dim());
                for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                    row.fill(g[[i, 0]]);
                }
                self.add_grad(a, ga);
            }
            Op::RowL2Norm(a) => {
                let x = &self.nodes[a].data;
                let norms = &self.nodes[out].data;
                let mut ga = Tensor::zeros(x.dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let n = norms[[i, 0]];
                    if n > 1e-300 {
                        let scale = g[[i, 0]] / n;
                        for (j, v) in row.iter().enumerate() {
                            ga[[i, j]] = scale * v;
                        }
                    }
                }
                self.add_grad(a, ga);
            }
            Op::BroadcastScalar(a, _, _) => {
                self.add_grad(a, Tensor::from_elem((1, 1), g.sum()));
            }
            Op::BroadcastRows(a, _) => {
                self.add_grad(a, g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)));
            }
            Op::BroadcastCols(a, _) => {
                self.add_grad(a, g.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1)));
            }
            Op::PermuteRows(a, ref perm) => {
                let mut ga = Tensor::zeros(self.nodes[a].data.dim());
                for (i, &src) in perm.iter().enumerate() {
                    ga.row_mut(src).assign(&g.row(i));
                }
                self.add_grad(a, ga);
            }
        }
    }

    /// Node ids from which `target` is reachable, within `0..=root`.
    fn depends_on(&self, target: Value, root: Value) -> Vec<bool> {
        let mut dep = vec![false; root.0 + 1];
        dep[target.0] = true;
        for i in target.0 + 1..=root.0 {
            let [p, q] = self.nodes[i].op.parents();
            let hit = |x: Option<usize>| x.map(|id| dep[id]).unwrap_or(false);
            if hit(p) || hit(q) {
                dep[i] = true;
            }
        }
        dep
    }

    /// Builds the gradient of scalar `f` with respect to `v` as new forward
    /// nodes of this graph, so the result is itself differentiable.
    ///
    /// Piecewise-linear ops enter through constant masks; smooth ops whose
    /// second derivative would depend on forward values held as constants are
    /// rejected rather than silently mis-differentiated.
    pub fn input_gradient_graph(&mut self, f: Value, v: Value) -> Result<Value, AdvError> {
        if !self.shape(f).is_scalar() {
            return Err(AdvError::NonScalarRoot(self.shape(f).to_string()));
        }
        if v.0 > f.0 {
            return Err(AdvError::NotAncestor);
        }
        let dep = self.depends_on(v, f);
        if !dep[f.0] {
            return Err(AdvError::NotAncestor);
        }
        // cotangent node per original node id, built top-down from f
        let mut cot: Vec<Option<Value>> = vec![None; f.0 + 1];
        cot[f.0] = Some(self.scalar(1.0));
        for i in (v.0..=f.0).rev() {
            if !dep[i] {
                continue;
            }
            let Some(g) = cot[i] else { continue };
            let op = self.nodes[i].op.clone();
            let out = Value(i);
            let mut send = |graph: &mut Graph, parent: usize, contrib: Value| -> Result<(), AdvError> {
                if !dep[parent] {
                    return Ok(());
                }
                cot[parent] = Some(match cot[parent] {
                    Some(existing) => graph.add(existing, contrib)?,
                    None => contrib,
                });
                Ok(())
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(self, a, g)?;
                    if dep[b] {
                        let gb = if self.shape(Value(b)).rows == 1 && self.shape(g).rows != 1 {
                            self.sum_rows(g)
                        } else {
                            g
                        };
                        send(self, b, gb)?;
                    }
                }
                Op::Sub(a, b) => {
                    send(self, a, g)?;
                    if dep[b] {
                        let gb = self.scale(g, -1.0);
                        send(self, b, gb)?;
                    }
                }
                Op::Mul(a, b) => {
                    if dep[a] {
                        let ga = self.mul(g, Value(b))?;
                        send(self, a, ga)?;
                    }
                    if dep[b] {
                        let gb = self.mul(g, Value(a))?;
                        send(self, b, gb)?;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    send(self, a, ga)?;
                }
                Op::Matmul(a, b) => {
                    if dep[a] {
                        let bt = self.transpose(Value(b));
                        let ga = self.matmul(g, bt)?;
                        send(self, a, ga)?;
                    }
                    if dep[b] {
                        let at = self.transpose(Value(a));
                        let gb = self.matmul(at, g)?;
                        send(self, b, gb)?;
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    send(self, a, ga)?;
                }
                Op::Concat(a, b) => {
                    let ca = self.shape(Value(a)).cols;
                    let cb = self.shape(Value(b)).cols;
                    if dep[a] {
                        let ga = self.slice_cols(g, 0, ca)?;
                        send(self, a, ga)?;
                    }
                    if dep[b] {
                        let gb = self.slice_cols(g, ca, ca + cb)?;
                        send(self, b, gb)?;
                    }
                }
                Op::SliceCols(a, s, _e) => {
                    let total = self.shape(Value(a)).cols;
                    let ga = self.pad_cols(g, s, total)?;
                    send(self, a, ga)?;
                }
                Op::PadCols(a, start, _total) => {
                    let c = self.shape(Value(a)).cols;
                    let ga = self.slice_cols(g, start, start + c)?;
                    send(self, a, ga)?;
                }
                Op::LeakyRelu(a, slope) => {
                    // piecewise linear: the mask is an exact local constant
                    let mask = self.nodes[a].data.mapv(|x| if x >= 0.0 { 1.0 } else { slope });
                    let m = self.leaf(mask);
                    let ga = self.mul(g, m)?;
                    send(self, a, ga)?;
                }
                Op::Square(a) => {
                    let ga = self.mul(g, Value(a))?;
                    let ga = self.scale(ga, 2.0);
                    send(self, a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, out)?;
                    send(self, a, ga)?;
                }
                Op::Sum(a) => {
                    let s = self.shape(Value(a));
                    let ga = self.broadcast_scalar(g, s.rows, s.cols)?;
                    send(self, a, ga)?;
                }
                Op::Mean(a) => {
                    let s = self.shape(Value(a));
                    let ga = self.broadcast_scalar(g, s.rows, s.cols)?;
                    let ga = self.scale(ga, 1.0 / s.len() as f64);
                    send(self, a, ga)?;
                }
                Op::SumRows(a) => {
                    let rows = self.shape(Value(a)).rows;
                    let ga = self.broadcast_rows(g, rows)?;
                    send(self, a, ga)?;
                }
                Op::SumCols(a) => {
                    let cols = self.shape(Value(a)).cols;
                    let ga = self.broadcast_cols(g, cols)?;
                    send(self, a, ga)?;
                }
                Op::BroadcastScalar(a, _, _) => {
                    let ga = self.sum(g);
                    send(self, a, ga)?;
                }
                Op::BroadcastRows(a, _) => {
                    let ga = self.sum_rows(g);
                    send(self, a, ga)?;
                }
                Op::BroadcastCols(a, _) => {
                    let ga = self.sum_cols(g);
                    send(self, a, ga)?;
                }
                Op::PermuteRows(a, perm) => {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let ga = self.permute_rows(g, &inv)?;
                    send(self, a, ga)?;
                }
                Op::Sqrt(_) | Op::Log(_) | Op::Sigmoid(_) | Op::Clamp(..) | Op::RowL2Norm(_) => {
                    return Err(AdvError::UnsupportedSecondOrder(op.name().to_string()));
                }
            }
        }
        cot[v.0].ok_or(AdvError::NotAncestor)
    }
}
