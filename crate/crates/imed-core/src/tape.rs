//! Reverse-mode automatic differentiation on dense `f64` matrices.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks the list in reverse and accumulates gradients for every node. All
//! values are `ndarray::Array2<f64>`: scalars are 1x1, row vectors 1xd and
//! mini-batches Bxd. A fresh tape is built per optimization step.

use std::ops::Range;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::shuffle::ShuffleTable;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `BxN + 1xN` broadcast over rows (bias add).
    AddRow(Var, Var),
    /// `Bx1 + 1xN -> BxN` outer broadcast sum.
    AddColRow(Var, Var),
    /// `BxN * Bx1` broadcast over columns.
    MulCol(Var, Var),
    /// `BxN / Bx1` broadcast over columns.
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, Range<usize>),
    /// Per-row outer product: `(Bxm, Bxn) -> Bx(m*n)`, row-major flattening.
    RowOuter(Var, Var),
    /// Identity forward; multiplies the incoming gradient by a constant.
    GradScale(Var, f64),
    /// Shuffle linear layer; `params` is `1xP` (owned) or `BxP` (per-instance).
    Shuffle {
        params: Var,
        x: Var,
        table: Rc<ShuffleTable>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`, zero matrix if the node was unreachable.
    pub fn get(&self, v: Var, tape: &Tape) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.nodes[v.0].value.raw_dim()),
        }
    }
}

/// A recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-1x1 node");
        m[(0, 0)]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    /// `a: BxN`, `row: 1xN`; adds the row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `col: Bx1`, `row: 1xN` -> `BxN` with `out[b, j] = col[b] + row[j]`.
    pub fn add_col_row(&mut self, col: Var, row: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1);
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(col) + self.value(row);
        self.push(v, Op::AddColRow(col, row))
    }

    /// `a: BxN`, `col: Bx1`; multiplies each row of `a` by its column entry.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1);
        assert_eq!(self.value(a).nrows(), self.value(col).nrows());
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    /// `a: BxN`, `col: Bx1`; divides each row of `a` by its column entry.
    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1);
        assert_eq!(self.value(a).nrows(), self.value(col).nrows());
        let v = self.value(a) / self.value(col);
        self.push(v, Op::DivCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).ncols(),
            self.value(b).nrows(),
            "matmul inner dims"
        );
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(v, Op::Softplus(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Row sums: `BxN -> Bx1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_axis(Axis(1));
        let b = s.len();
        let v = s.into_shape_with_order((b, 1)).unwrap();
        self.push(v, Op::SumRows(a))
    }

    /// Column sums: `BxN -> 1xN`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_axis(Axis(0));
        let n = s.len();
        let v = s.into_shape_with_order((1, n)).unwrap();
        self.push(v, Op::SumCols(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| x - m);
            let lse = row.mapv(f64::exp).sum().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let b = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((b, total));
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.nrows(), b, "concat_cols rows");
            v.slice_mut(s![.., off..off + m.ncols()]).assign(m);
            off += m.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Var {
        assert!(range.end <= self.value(a).ncols());
        let v = self.value(a).slice(s![.., range.clone()]).to_owned();
        self.push(v, Op::SliceCols(a, range))
    }

    /// Per-row outer product flattened row-major: `out[b, k*n + j] = a[b,k]*c[b,j]`.
    pub fn row_outer(&mut self, a: Var, c: Var) -> Var {
        let (b, m) = self.value(a).dim();
        let (b2, n) = self.value(c).dim();
        assert_eq!(b, b2, "row_outer batch");
        let mut v = Array2::zeros((b, m * n));
        for i in 0..b {
            for k in 0..m {
                let fa = self.value(a)[(i, k)];
                for j in 0..n {
                    v[(i, k * n + j)] = fa * self.value(c)[(i, j)];
                }
            }
        }
        self.push(v, Op::RowOuter(a, c))
    }

    /// Identity in the forward pass; scales the gradient by `factor` in the
    /// backward pass. `factor = -lambda` gives a gradient reversal layer.
    pub fn grad_scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::GradScale(a, factor))
    }

    /// Shuffle linear forward. `params` is `1xP` for owned weights or `BxP`
    /// for per-instance weights; `x` is `Bxd_i`.
    pub fn shuffle_forward(&mut self, table: Rc<ShuffleTable>, params: Var, x: Var) -> Var {
        let p = self.value(params);
        let xv = self.value(x);
        let b = xv.nrows();
        assert_eq!(xv.ncols(), table.spec.d_i, "shuffle input width");
        assert_eq!(p.ncols(), table.spec.param_count(), "shuffle param count");
        assert!(
            p.nrows() == 1 || p.nrows() == b,
            "shuffle params rows must be 1 or batch size"
        );
        let per_instance = p.nrows() != 1;
        let mut v = Array2::zeros((b, table.spec.d_o));
        for i in 0..b {
            let prow = if per_instance { i } else { 0 };
            for &(r, c, k) in &table.triplets {
                v[(i, c as usize)] += xv[(i, r as usize)] * p[(prow, k as usize)];
            }
        }
        self.push(v, Op::Shuffle { params, x, table })
    }

    /// Reverse pass from a scalar (1x1) loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-insert so callers can read the gradient afterwards.
            grads[idx] = Some(g.clone());
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * self.value(*b));
                    accumulate(&mut grads, *b, &g * self.value(*a));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, &g / bv);
                    let ga = -&g * self.value(*a) / (bv * bv);
                    accumulate(&mut grads, *b, ga);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, g.clone());
                    let gr = g.sum_axis(Axis(0));
                    let n = gr.len();
                    accumulate(&mut grads, *row, gr.into_shape_with_order((1, n)).unwrap());
                }
                Op::AddColRow(col, row) => {
                    let gc = g.sum_axis(Axis(1));
                    let b = gc.len();
                    accumulate(&mut grads, *col, gc.into_shape_with_order((b, 1)).unwrap());
                    let gr = g.sum_axis(Axis(0));
                    let n = gr.len();
                    accumulate(&mut grads, *row, gr.into_shape_with_order((1, n)).unwrap());
                }
                Op::MulCol(a, col) => {
                    accumulate(&mut grads, *a, &g * self.value(*col));
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1));
                    let b = gc.len();
                    accumulate(&mut grads, *col, gc.into_shape_with_order((b, 1)).unwrap());
                }
                Op::DivCol(a, col) => {
                    let cv = self.value(*col);
                    accumulate(&mut grads, *a, &g / cv);
                    let gc = (-(&g) * self.value(*a) / (cv * cv)).sum_axis(Axis(1));
                    let b = gc.len();
                    accumulate(&mut grads, *col, gc.into_shape_with_order((b, 1)).unwrap());
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, &g * y * &y.mapv(|v| 1.0 - v));
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &node.value),
                Op::Ln(a) => accumulate(&mut grads, *a, &g / self.value(*a)),
                Op::Softplus(a) => {
                    let s = self.value(*a).mapv(stable_sigmoid);
                    accumulate(&mut grads, *a, &g * &s);
                }
                Op::SumAll(a) => {
                    let gv = g[(0, 0)];
                    accumulate(
                        &mut grads,
                        *a,
                        Array2::from_elem(self.value(*a).raw_dim(), gv),
                    );
                }
                Op::SumRows(a) => {
                    let av = self.value(*a);
                    let mut ga = Array2::zeros(av.raw_dim());
                    for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                        row.fill(g[(i, 0)]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let av = self.value(*a);
                    let mut ga = Array2::zeros(av.raw_dim());
                    for (j, mut col) in ga.columns_mut().into_iter().enumerate() {
                        col.fill(g[(0, j)]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1));
                    let mut ga = y.clone();
                    for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let d = dot[i];
                        for (j, v) in row.indexed_iter_mut() {
                            *v *= g[(i, j)] - d;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let sm = node.value.mapv(f64::exp);
                    let rowsum = g.sum_axis(Axis(1));
                    let mut ga = g.clone();
                    for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let rs = rowsum[i];
                        for (j, v) in row.indexed_iter_mut() {
                            *v -= sm[(i, j)] * rs;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let gp = g.slice(s![.., off..off + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        off += w;
                    }
                }
                Op::SliceCols(a, range) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., range.clone()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowOuter(a, c) => {
                    let av = self.value(*a);
                    let cv = self.value(*c);
                    let (b, m) = av.dim();
                    let n = cv.ncols();
                    let mut ga = Array2::zeros((b, m));
                    let mut gc = Array2::zeros((b, n));
                    for i in 0..b {
                        for k in 0..m {
                            for j in 0..n {
                                let go = g[(i, k * n + j)];
                                ga[(i, k)] += go * cv[(i, j)];
                                gc[(i, j)] += go * av[(i, k)];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *c, gc);
                }
                Op::GradScale(a, factor) => accumulate(&mut grads, *a, &g * *factor),
                Op::Shuffle { params, x, table } => {
                    let pv = self.value(*params);
                    let xv = self.value(*x);
                    let b = xv.nrows();
                    let per_instance = pv.nrows() != 1;
                    let mut gp = Array2::zeros(pv.raw_dim());
                    let mut gx = Array2::zeros(xv.raw_dim());
                    for i in 0..b {
                        let prow = if per_instance { i } else { 0 };
                        for &(r, c, k) in &table.triplets {
                            let (r, c, k) = (r as usize, c as usize, k as usize);
                            let go = g[(i, c)];
                            gp[(prow, k)] += go * xv[(i, r)];
                            gx[(i, r)] += go * pv[(prow, k)];
                        }
                    }
                    accumulate(&mut grads, *params, gp);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a plain matrix (used outside the tape as well).
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    v
}
