//! Reverse-mode tape over dense matrices.
//!
//! A [`Tape`] records every forward operation together with the parent node
//! ids it consumed. [`Tape::backward`] replays the records in reverse,
//! accumulating gradients into per-node buffers that callers read back
//! through [`Gradients`]. Tapes are single-use: a second backward without a
//! fresh tape is a contract error.
//!
//! Numeric guards: `log` computes `ln(x + EPS)` and `div` computes
//! `a / (b + EPS)` with `EPS = 1e-12`; denominators are assumed nonnegative
//! (softmax sums, L1 norms, degree sums), which holds everywhere the guard is
//! relied on.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::sparse::SparseMatrix;
use crate::tensor::Tensor;

/// Guard added inside `ln` and denominators.
pub const EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Spmm { s: Rc<SparseMatrix>, x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Neg { a: usize },
    Log { a: usize },
    Exp { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Powf { a: usize, p: f64 },
    MaxScalar { a: usize, c: f64 },
    RowSoftmax { a: usize, tau: f64 },
    Sum { a: usize },
    RowSum { a: usize },
    Transpose { a: usize },
    ConcatRows { a: usize, b: usize },
    SliceRows { a: usize, start: usize },
    GatherRows { a: usize, ids: Rc<Vec<usize>> },
    ScaleRows { a: usize, v: usize },
    AddBias { a: usize, b: usize },
    Scatter { t: usize, positions: Rc<Vec<(usize, usize)>> },
    Reshape { a: usize },
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Value) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Recording tape. One forward pass plus one backward pass, then discard.
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn values(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].values
    }

    /// Scalar contents of a 1x1 node.
    pub fn item(&self, v: Value) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    pub fn to_tensor(&self, v: Value) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.rows, n.cols, n.values.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op, needs_grad: bool) -> Value {
        debug_assert_eq!(values.len(), rows * cols);
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite value produced on tape"
        );
        self.nodes.push(Node {
            rows,
            cols,
            values,
            op,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Inputs ──────────────────────────────────────────────────────────

    /// Lease a parameter tensor onto the tape. Gradients accumulate back via
    /// [`Gradients::wrt`] and [`Tensor::accumulate_grad`].
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        self.push(
            t.rows(),
            t.cols(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Value> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "constant {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(self.push(rows, cols, values, Op::Leaf, false))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k1) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k1 != k2 {
            return Err(Error::Dimension(format!(
                "matmul {m}x{k1} * {k2}x{n}: inner dims differ"
            )));
        }
        let out = matmul_raw(self.values(a), self.values(b), m, k1, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatMul { a: a.0, b: b.0 }, needs))
    }

    /// Product of a constant sparse matrix with a dense tape value.
    pub fn spmm(&mut self, s: &Rc<SparseMatrix>, x: Value) -> Result<Value> {
        let (xr, xc) = self.shape(x);
        if s.cols() != xr {
            return Err(Error::Dimension(format!(
                "spmm {}x{} * {xr}x{xc}: inner dims differ",
                s.rows(),
                s.cols()
            )));
        }
        let out = s.mul_dense(self.values(x), xc);
        let needs = self.needs(x);
        Ok(self.push(
            s.rows(),
            xc,
            out,
            Op::Spmm {
                s: Rc::clone(s),
                x: x.0,
            },
            needs,
        ))
    }

    pub fn transpose(&mut self, a: Value) -> Value {
        let (r, c) = self.shape(a);
        let src = self.values(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        self.push(c, r, out, Op::Transpose { a: a.0 }, needs)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(&self, a: Value, b: Value, name: &str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{name}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Add { a: a.0, b: b.0 }, needs))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Sub { a: a.0, b: b.0 }, needs))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Mul { a: a.0, b: b.0 }, needs))
    }

    /// Elementwise `a / (b + EPS)`. Denominators are assumed nonnegative.
    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape(a, b, "div")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x / (y + EPS))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Div { a: a.0, b: b.0 }, needs))
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Value {
        let (r, cc) = self.shape(a);
        let out: Vec<f64> = self.values(a).iter().map(|x| x + c).collect();
        let needs = self.needs(a);
        self.push(r, cc, out, Op::AddScalar { a: a.0 }, needs)
    }

    pub fn mul_scalar(&mut self, a: Value, c: f64) -> Value {
        let (r, cc) = self.shape(a);
        let out: Vec<f64> = self.values(a).iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(r, cc, out, Op::MulScalar { a: a.0, c }, needs)
    }

    pub fn neg(&mut self, a: Value) -> Value {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.values(a).iter().map(|x| -x).collect();
        let needs = self.needs(a);
        self.push(r, c, out, Op::Neg { a: a.0 }, needs)
    }

    /// `ln(x + EPS)`.
    pub fn log(&mut self, a: Value) -> Value {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.values(a).iter().map(|x| (x + EPS).ln()).collect();
        let needs = self.needs(a);
        self.push(r, c, out, Op::Log { a: a.0 }, needs)
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.values(a).iter().map(|x| x.exp()).collect();
        let needs = self.needs(a);
        self.push(r, c, out, Op::Exp { a: a.0 }, needs)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.values(a).iter().map(|x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(r, c, out, Op::Relu { a: a.0 }, needs)
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.values(a).iter().map(|x| sigmoid(*x)).collect();
        let needs = self.needs(a);
        self.push(r, c, out, Op::Sigmoid { a: a.0 }, needs)
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.values(a).iter().map(|x| x.tanh()).collect();
        let needs = self.needs(a);
        self.push(r, c, out, Op::Tanh { a: a.0 }, needs)
    }

    /// Elementwise `x^p`; inputs must be positive when p is fractional.
    pub fn powf(&mut self, a: Value, p: f64) -> Value {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.values(a).iter().map(|x| x.powf(p)).collect();
        let needs = self.needs(a);
        self.push(r, c, out, Op::Powf { a: a.0, p }, needs)
    }

    /// Elementwise `max(x, c)`; zero gradient where the clamp is active.
    pub fn max_scalar(&mut self, a: Value, c: f64) -> Value {
        let (r, cc) = self.shape(a);
        let out: Vec<f64> = self.values(a).iter().map(|x| x.max(c)).collect();
        let needs = self.needs(a);
        self.push(r, cc, out, Op::MaxScalar { a: a.0, c }, needs)
    }

    // ── Softmax and reductions ──────────────────────────────────────────

    /// Tempered softmax along each row, computed with max-subtraction.
    pub fn row_softmax(&mut self, a: Value, tau: f64) -> Result<Value> {
        if tau <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let (r, c) = self.shape(a);
        let src = self.values(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (d, x) in dst.iter_mut().zip(row) {
                *d = ((x - m) / tau).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(r, c, out, Op::RowSoftmax { a: a.0, tau }, needs))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Value) -> Value {
        let total: f64 = self.values(a).iter().sum();
        let needs = self.needs(a);
        self.push(1, 1, vec![total], Op::Sum { a: a.0 }, needs)
    }

    /// Row sums, as an n x 1 node.
    pub fn row_sum(&mut self, a: Value) -> Value {
        let (r, c) = self.shape(a);
        let src = self.values(a);
        let out: Vec<f64> = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let needs = self.needs(a);
        self.push(r, 1, out, Op::RowSum { a: a.0 }, needs)
    }

    // ── Structure ───────────────────────────────────────────────────────

    pub fn concat_rows(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(Error::Dimension(format!(
                "concat_rows: column counts {ca} and {cb} differ"
            )));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.values(a));
        out.extend_from_slice(self.values(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(ra + rb, ca, out, Op::ConcatRows { a: a.0, b: b.0 }, needs))
    }

    /// Rows `start..end` as a new node.
    pub fn slice_rows(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{end} outside 0..{r}"
            )));
        }
        let out = self.values(a)[start * c..end * c].to_vec();
        let needs = self.needs(a);
        Ok(self.push(end - start, c, out, Op::SliceRows { a: a.0, start }, needs))
    }

    /// Select rows by index (repeats allowed). Backward scatter-adds.
    pub fn gather_rows(&mut self, a: Value, ids: Rc<Vec<usize>>) -> Result<Value> {
        let (r, c) = self.shape(a);
        for &i in ids.iter() {
            if i >= r {
                return Err(Error::Dimension(format!("gather_rows: id {i} >= {r}")));
            }
        }
        let src = self.values(a);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let needs = self.needs(a);
        Ok(self.push(ids.len(), c, out, Op::GatherRows { a: a.0, ids }, needs))
    }

    /// Scale row i of `a` by `v[i]`; `v` must be n x 1.
    pub fn scale_rows(&mut self, a: Value, v: Value) -> Result<Value> {
        let (r, c) = self.shape(a);
        let (vr, vc) = self.shape(v);
        if vr != r || vc != 1 {
            return Err(Error::Dimension(format!(
                "scale_rows: scale is {vr}x{vc}, expected {r}x1"
            )));
        }
        let src = self.values(a);
        let scale = self.values(v);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let s = scale[i];
            for j in 0..c {
                out[i * c + j] = src[i * c + j] * s;
            }
        }
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(r, c, out, Op::ScaleRows { a: a.0, v: v.0 }, needs))
    }

    /// Broadcast-add a 1 x m bias to every row of `a`.
    pub fn add_bias(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != c {
            return Err(Error::Dimension(format!(
                "add_bias: bias is {br}x{bc}, expected 1x{c}"
            )));
        }
        let src = self.values(a);
        let bias = self.values(b).to_vec();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = src[i * c + j] + bias[j];
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::AddBias { a: a.0, b: b.0 }, needs))
    }

    /// Scatter a 1 x n vector into a zero `rows x cols` matrix; entry i of
    /// `t` lands at `positions[i]`. Duplicate positions accumulate.
    pub fn scatter(
        &mut self,
        t: Value,
        positions: Rc<Vec<(usize, usize)>>,
        rows: usize,
        cols: usize,
    ) -> Result<Value> {
        let (tr, tc) = self.shape(t);
        if tr != 1 || tc != positions.len() {
            return Err(Error::Dimension(format!(
                "scatter: source is {tr}x{tc}, expected 1x{}",
                positions.len()
            )));
        }
        for &(r, c) in positions.iter() {
            if r >= rows || c >= cols {
                return Err(Error::Dimension(format!(
                    "scatter: position ({r},{c}) outside {rows}x{cols}"
                )));
            }
        }
        let src = self.values(t);
        let mut out = vec![0.0; rows * cols];
        for (i, &(r, c)) in positions.iter().enumerate() {
            out[r * cols + c] += src[i];
        }
        let needs = self.needs(t);
        Ok(self.push(rows, cols, out, Op::Scatter { t: t.0, positions }, needs))
    }

    /// Reinterpret the row-major buffer under a new shape of equal size.
    pub fn reshape(&mut self, a: Value, rows: usize, cols: usize) -> Result<Value> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::Dimension(format!(
                "reshape {r}x{c} -> {rows}x{cols}: sizes differ"
            )));
        }
        let out = self.values(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(rows, cols, out, Op::Reshape { a: a.0 }, needs))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every `requires_grad` tensor leased
    /// onto the tape and reachable from `loss` receives a gradient;
    /// unreachable nodes report `None` (read as zeros).
    pub fn backward(&mut self, loss: Value) -> Result<Gradients> {
        if self.spent {
            return Err(Error::Contract(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let (lr, lc) = self.shape(loss);
        if lr != 1 || lc != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {lr}x{lc}"
            )));
        }
        self.spent = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], node: usize, update: impl FnOnce(&mut [f64])) {
        if !self.nodes[node].needs_grad {
            return;
        }
        let size = self.nodes[node].values.len();
        let buf = grads[node].get_or_insert_with(|| vec![0.0; size]);
        update(buf);
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = self.nodes[*b].cols;
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                self.accumulate(grads, *a, |ga| {
                    // ga += g * b^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    // gb += a^T * g
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Spmm { s, x } => {
                let xc = self.nodes[*x].cols;
                let gx = s.mul_dense_transposed(g, xc);
                self.accumulate(grads, *x, |buf| {
                    for (b, v) in buf.iter_mut().zip(&gx) {
                        *b += v;
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g, 1.0));
                self.accumulate(grads, *b, |gb| add_into(gb, g, 1.0));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g, 1.0));
                self.accumulate(grads, *b, |gb| add_into(gb, g, -1.0));
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div { a, b } => {
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / (bv[i] + EPS);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..g.len() {
                        let d = bv[i] + EPS;
                        gb[i] -= g[i] * av[i] / (d * d);
                    }
                });
            }
            Op::AddScalar { a } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g, 1.0));
            }
            Op::MulScalar { a, c } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g, *c));
            }
            Op::Neg { a } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g, -1.0));
            }
            Op::Log { a } => {
                let av = &self.nodes[*a].values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / (av[i] + EPS);
                    }
                });
            }
            Op::Exp { a } => {
                let out = &node.values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i];
                    }
                });
            }
            Op::Relu { a } => {
                let av = &self.nodes[*a].values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let out = &node.values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Tanh { a } => {
                let out = &node.values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Powf { a, p } => {
                let av = &self.nodes[*a].values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * p * av[i].powf(p - 1.0);
                    }
                });
            }
            Op::MaxScalar { a, c } => {
                let av = &self.nodes[*a].values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > *c {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::RowSoftmax { a, tau } => {
                let (r, c) = (node.rows, node.cols);
                let out = &node.values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        let p = &out[i * c..(i + 1) * c];
                        let gi = &g[i * c..(i + 1) * c];
                        let dot: f64 = p.iter().zip(gi).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            ga[i * c + j] += p[j] * (gi[j] - dot) / tau;
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let s = g[0];
                self.accumulate(grads, *a, |ga| {
                    for v in ga.iter_mut() {
                        *v += s;
                    }
                });
            }
            Op::RowSum { a } => {
                let c = self.nodes[*a].cols;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..node.rows {
                        for j in 0..c {
                            ga[i * c + j] += g[i];
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let (r, c) = (node.rows, node.cols); // shape of the transposed output
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows { a, b } => {
                let asz = self.nodes[*a].values.len();
                self.accumulate(grads, *a, |ga| add_into(ga, &g[..asz], 1.0));
                self.accumulate(grads, *b, |gb| add_into(gb, &g[asz..], 1.0));
            }
            Op::SliceRows { a, start } => {
                let c = node.cols;
                let off = start * c;
                self.accumulate(grads, *a, |ga| {
                    for (i, v) in g.iter().enumerate() {
                        ga[off + i] += v;
                    }
                });
            }
            Op::GatherRows { a, ids } => {
                let c = node.cols;
                self.accumulate(grads, *a, |ga| {
                    for (row, &src) in ids.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[row * c + j];
                        }
                    }
                });
            }
            Op::ScaleRows { a, v } => {
                let (r, c) = (node.rows, node.cols);
                let av = &self.nodes[*a].values;
                let sv = &self.nodes[*v].values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * sv[i];
                        }
                    }
                });
                self.accumulate(grads, *v, |gv| {
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j] * av[i * c + j];
                        }
                        gv[i] += s;
                    }
                });
            }
            Op::AddBias { a, b } => {
                let (r, c) = (node.rows, node.cols);
                self.accumulate(grads, *a, |ga| add_into(ga, g, 1.0));
                self.accumulate(grads, *b, |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Scatter { t, positions } => {
                let cols = node.cols;
                self.accumulate(grads, *t, |gt| {
                    for (i, &(r, c)) in positions.iter().enumerate() {
                        gt[i] += g[r * cols + c];
                    }
                });
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g, 1.0));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        Tensor::new(rows, cols, values).unwrap().with_grad(true)
    }

    /// Central finite differences of `f` at `x0`, independent of the tape.
    fn finite_diff(x0: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let eps = 1e-5;
        let mut g = vec![0.0; x0.len()];
        let mut x = x0.to_vec();
        for i in 0..x.len() {
            x[i] = x0[i] + eps;
            let hi = f(&x);
            x[i] = x0[i] - eps;
            let lo = f(&x);
            x[i] = x0[i];
            g[i] = (hi - lo) / (2.0 * eps);
        }
        g
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = tape.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = tape.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.values(out), tape.values(x));
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.constant(2, 1, vec![1.0, 1.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = tape.constant(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b0: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut tape = Tape::new();
        let a = tape.leaf(&tensor(3, 3, a0.clone()));
        let b = tape.constant(3, 3, b0.clone()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();

        let fd = finite_diff(&a0, |av| {
            matmul_raw(av, &b0, 3, 3, 3).iter().sum::<f64>()
        });
        assert!(max_rel_err(grads.wrt(a).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(1, 2, vec![-1.0, 2.0]).unwrap();
        let r = tape.relu(x);
        assert_eq!(tape.values(r), &[0.0, 2.0]);
        let z = tape.constant(1, 1, vec![0.0]).unwrap();
        let s = tape.sigmoid(z);
        assert_eq!(tape.values(s), &[0.5]);
    }

    #[test]
    fn log_gradient_is_guarded_reciprocal() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(1, 1, vec![1.0]));
        let y = tape.log(x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let expected = 1.0 / (1.0 + EPS);
        assert!((grads.wrt(x).unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn row_softmax_uniform_and_sharp() {
        let mut tape = Tape::new();
        let x = tape.constant(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let p = tape.row_softmax(x, 1.0).unwrap();
        for v in tape.values(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let y = tape.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let q = tape.row_softmax(y, 0.01).unwrap();
        assert!(tape.values(q)[2] > 1.0 - 1e-9);
    }

    #[test]
    fn row_softmax_closed_form_pair() {
        let mut tape = Tape::new();
        let x = tape.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let p = tape.row_softmax(x, 1.0).unwrap();
        let v = tape.values(p);
        assert!((v[0] - 0.2689).abs() < 1e-4);
        assert!((v[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn row_softmax_rejects_nonpositive_temperature() {
        let mut tape = Tape::new();
        let x = tape.constant(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            tape.row_softmax(x, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(&tensor(2, 3, vec![0.5; 6]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn detached_tensor_keeps_zero_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf(&tensor(1, 2, vec![1.0, 2.0]));
        let detached = tape.constant(1, 2, vec![3.0, 4.0]).unwrap();
        let joined = tape.mul(w, detached).unwrap();
        let loss = tape.sum(joined);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(detached).is_none());
        let mut t = tensor(1, 2, vec![3.0, 4.0]);
        t.accumulate_grad(grads.wrt(detached)).unwrap();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn double_backward_without_reset_errors() {
        let mut tape = Tape::new();
        let w = tape.leaf(&tensor(1, 1, vec![1.0]));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(&tensor(1, 2, vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    /// Finite-difference sweep over every differentiable op on random inputs
    /// in [-2, 2] (shifted positive where the domain demands it).
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rows = 3;
        let cols = 4;
        let n = rows * cols;
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x_pos: Vec<f64> = x0.iter().map(|v| v.abs() + 0.5).collect();
        let y0: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y_pos: Vec<f64> = y0.iter().map(|v| v.abs() + 0.5).collect();

        type BuildFn = fn(&mut Tape, Value, Value) -> Value;
        // (name, needs positive x, builder over (x, y_const))
        let cases: Vec<(&str, bool, BuildFn)> = vec![
            ("add", false, |t, x, y| t.add(x, y).unwrap()),
            ("sub", false, |t, x, y| t.sub(x, y).unwrap()),
            ("mul", false, |t, x, y| t.mul(x, y).unwrap()),
            ("div", true, |t, x, y| t.div(y, x).unwrap()),
            ("neg", false, |t, x, _| t.neg(x)),
            ("log", true, |t, x, _| t.log(x)),
            ("exp", false, |t, x, _| t.exp(x)),
            ("sigmoid", false, |t, x, _| t.sigmoid(x)),
            ("tanh", false, |t, x, _| t.tanh(x)),
            ("powf", true, |t, x, _| t.powf(x, -0.5)),
            ("softmax", false, |t, x, _| t.row_softmax(x, 0.7).unwrap()),
            ("rowsum", false, |t, x, _| t.row_sum(x)),
            ("transpose", false, |t, x, _| t.transpose(x)),
            ("scale_rows", false, |t, x, y| {
                let v = t.slice_rows(y, 0, rows_of(t, y)).unwrap();
                let v = t.row_sum(v);
                t.scale_rows(x, v).unwrap()
            }),
            ("max_scalar", false, |t, x, _| t.max_scalar(x, 0.3)),
        ];

        fn rows_of(t: &Tape, v: Value) -> usize {
            t.shape(v).0
        }

        for (name, positive, build) in cases {
            let base = if positive { &x_pos } else { &x0 };
            let yv = if positive { &y_pos } else { &y0 };

            let mut tape = Tape::new();
            let x = tape.leaf(&tensor(rows, cols, base.clone()));
            let y = tape.constant(rows, cols, yv.clone()).unwrap();
            let out = build(&mut tape, x, y);
            // weight the output so the reduction is not trivially linear
            let w: Vec<f64> = (0..tape.values(out).len())
                .map(|i| 0.3 + 0.1 * i as f64)
                .collect();
            let (orows, ocols) = tape.shape(out);
            let wv = tape.constant(orows, ocols, w.clone()).unwrap();
            let weighted = tape.mul(out, wv).unwrap();
            let loss = tape.sum(weighted);
            let grads = tape.backward(loss).unwrap();
            let analytic = grads.wrt(x).unwrap().to_vec();

            let fd = finite_diff(base, |xs| {
                let mut t2 = Tape::new();
                let x2 = t2.constant(rows, cols, xs.to_vec()).unwrap();
                let y2 = t2.constant(rows, cols, yv.clone()).unwrap();
                let out2 = build(&mut t2, x2, y2);
                t2.values(out2)
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            });
            let err = max_rel_err(&analytic, &fd);
            assert!(err < 1e-4, "op {name}: max relative error {err}");
        }
    }

    #[test]
    fn structural_ops_route_gradients() {
        // concat + slice + gather + scatter + bias roundtrip under FD.
        let x0 = vec![0.4, -1.2, 0.9, 2.0, -0.3, 0.7];
        let forward = |xs: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.constant(3, 2, xs.to_vec()).unwrap();
            let c = t.constant(2, 2, vec![1.0, -1.0, 0.5, 0.25]).unwrap();
            let cat = t.concat_rows(x, c).unwrap();
            let picked = t
                .gather_rows(cat, Rc::new(vec![0, 2, 2, 4]))
                .unwrap();
            let sliced = t.slice_rows(picked, 1, 4).unwrap();
            let bias = t.constant(1, 2, vec![0.1, -0.2]).unwrap();
            let biased = t.add_bias(sliced, bias).unwrap();
            let flat = t.reshape(biased, 1, 6).unwrap();
            let scat = t
                .scatter(
                    flat,
                    Rc::new(vec![(0, 0), (1, 1), (2, 2), (0, 1), (1, 0), (2, 2)]),
                    3,
                    3,
                )
                .unwrap();
            let sq = t.mul(scat, scat).unwrap();
            let s = t.sum(sq);
            t.item(s)
        };

        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(3, 2, x0.clone()));
        let c = tape.constant(2, 2, vec![1.0, -1.0, 0.5, 0.25]).unwrap();
        let cat = tape.concat_rows(x, c).unwrap();
        let picked = tape.gather_rows(cat, Rc::new(vec![0, 2, 2, 4])).unwrap();
        let sliced = tape.slice_rows(picked, 1, 4).unwrap();
        let bias = tape.constant(1, 2, vec![0.1, -0.2]).unwrap();
        let biased = tape.add_bias(sliced, bias).unwrap();
        let flat = tape.reshape(biased, 1, 6).unwrap();
        let scat = tape
            .scatter(
                flat,
                Rc::new(vec![(0, 0), (1, 1), (2, 2), (0, 1), (1, 0), (2, 2)]),
                3,
                3,
            )
            .unwrap();
        let sq = tape.mul(scat, scat).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();

        let fd = finite_diff(&x0, forward);
        assert!(max_rel_err(grads.wrt(x).unwrap(), &fd) < 1e-5);
    }

    #[test]
    fn spmm_gradient_is_transpose_product() {
        let s = Rc::new(
            SparseMatrix::from_triplets(2, 3, &[(0, 0, 2.0), (0, 2, 1.0), (1, 1, -1.0)]).unwrap(),
        );
        let x0 = vec![0.5, 1.5, -0.5, 2.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(3, 2, x0.clone()));
        let y = tape.spmm(&s, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let fd = finite_diff(&x0, |xs| s.mul_dense(xs, 2).iter().sum::<f64>());
        assert!(max_rel_err(grads.wrt(x).unwrap(), &fd) < 1e-6);
    }
}
