//! Reverse-mode tape over dense matrices.
//!
//! Every node holds a 2-D array; column vectors are `n x 1`, row vectors
//! `1 x m`, scalars `1 x 1`. Backward rules are written per primitive.

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::params::{Gradients, ParamId, ParameterStore};
use super::DiffError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Exp,
    Log,
    Square,
    Sqrt,
    Abs,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Abs => "abs",
        }
    }
}

#[derive(Debug)]
struct GruCache<S> {
    reset: Array2<S>,
    update: Array2<S>,
    candidate: Array2<S>,
    hidden_candidate_lin: Array2<S>,
}

#[derive(Debug)]
enum Op<S> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    DivCol(NodeId, NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId),
    Unary(NodeId, Unary),
    Atan2(NodeId, NodeId),
    Clamp(NodeId, S, S),
    SumAll(NodeId),
    SumCols(NodeId),
    SumRows(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    LogSumExpRows(NodeId, Array2<S>),
    SoftmaxXent(NodeId, Vec<usize>, Array2<S>),
    Gru {
        inputs: [NodeId; 6],
        cache: Box<GruCache<S>>,
    },
}

struct Node<S> {
    value: Array2<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Parameter handles of one gated recurrent unit, bound to a store.
///
/// Gate layout along the `3H` axis is `[reset, update, candidate]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub hidden: usize,
}

impl GruParams {
    pub fn register<S: Scalar>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            w_input: store.insert_weight(&format!("{prefix}.w_input"), input, 3 * hidden)?,
            w_hidden: store.insert_weight(&format!("{prefix}.w_hidden"), hidden, 3 * hidden)?,
            b_input: store.insert_bias(&format!("{prefix}.b_input"), 3 * hidden)?,
            b_hidden: store.insert_bias(&format!("{prefix}.b_hidden"), 3 * hidden)?,
            hidden,
        })
    }
}

/// Weight and bias of an affine map `y = x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AffineParams {
    pub fn register<S: Scalar>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        input: usize,
        output: usize,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            weight: store.insert_weight(&format!("{prefix}.weight"), input, output)?,
            bias: store.insert_bias(&format!("{prefix}.bias"), output)?,
        })
    }
}

/// Records a forward computation so gradients can be pulled back through it.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    bound: HashMap<ParamId, NodeId>,
    frozen: bool,
    non_finite: Option<(usize, &'static str)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            frozen: false,
            non_finite: None,
        }
    }

    /// A tape whose parameter leaves are treated as constants.
    pub fn frozen() -> Self {
        Self {
            frozen: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<S> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> S {
        self.nodes[id.0].value[[0, 0]]
    }

    /// First primitive that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<(), DiffError> {
        match self.non_finite {
            Some((node, primitive)) => Err(DiffError::NonFinite { primitive, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>, name: &'static str) -> NodeId {
        if self.non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.non_finite = Some((self.nodes.len(), name));
        }
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient is propagated to it.
    pub fn input(&mut self, value: Array2<S>) -> NodeId {
        self.push(value, Op::Input, "input")
    }

    /// Leaf whose gradient can be queried with [`Tape::gradient_wrt`].
    pub fn variable(&mut self, value: Array2<S>) -> NodeId {
        let id = self.push(value, Op::Input, "input");
        self.nodes[id.0].needs_grad = true;
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, rows: usize, cols: usize, v: S) -> NodeId {
        self.input(Array2::from_elem((rows, cols), v))
    }

    /// Leaf bound to a stored parameter. Repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParameterStore<S>, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let op = if self.frozen {
            Op::Input
        } else {
            Op::Param(id)
        };
        let n = self.push(store.get(id).clone(), op, "param");
        self.bound.insert(id, n);
        n
    }

    fn v(&self, id: NodeId) -> ArrayView2<'_, S> {
        self.nodes[id.0].value.view()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.v(a).dot(&self.v(b));
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.v(a).dot(&self.v(b).t());
        self.push(out, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.v(a) + &self.v(b);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.v(a) - &self.v(b);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.v(a) * &self.v(b);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.v(a) / &self.v(b);
        self.push(out, Op::Div(a, b), "div")
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let out = &self.v(a) + &self.v(row);
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    /// Multiplies every column of `a` by the `n x 1` column `col`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let out = &self.v(a) * &self.v(col);
        self.push(out, Op::MulCol(a, col), "mul_col")
    }

    pub fn div_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let out = &self.v(a) / &self.v(col);
        self.push(out, Op::DivCol(a, col), "div_col")
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> NodeId {
        let out = self.v(a).mapv(|x| x * factor);
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -S::one())
    }

    pub fn add_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let out = self.v(a).mapv(|x| x + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    fn unary(&mut self, a: NodeId, kind: Unary) -> NodeId {
        let f: fn(S) -> S = match kind {
            Unary::Tanh => |x| x.tanh(),
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Relu => |x| if x > S::zero() { x } else { S::zero() },
            Unary::Exp => |x| x.exp(),
            Unary::Log => |x| x.ln(),
            Unary::Square => |x| x * x,
            Unary::Sqrt => |x| x.sqrt(),
            Unary::Abs => |x| x.abs(),
        };
        let out = self.v(a).mapv(f);
        self.push(out, Op::Unary(a, kind), kind.name())
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Softplus)
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Relu)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Log)
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Square)
    }
    /// Square root whose derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sqrt)
    }
    /// Absolute value with subgradient zero at the origin.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Abs)
    }

    /// Elementwise `atan2(y, x)`; the gradient at `(0, 0)` is zero.
    pub fn atan2(&mut self, y: NodeId, x: NodeId) -> NodeId {
        let mut out = self.nodes[y.0].value.clone();
        Zip::from(&mut out)
            .and(&self.nodes[x.0].value)
            .for_each(|o, &xv| *o = o.atan2(xv));
        self.push(out, Op::Atan2(y, x), "atan2")
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: NodeId, lo: S, hi: S) -> NodeId {
        let out = self.v(a).mapv(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi), "clamp")
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.v(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, S::one() / S::lit(n as f64))
    }

    /// Row sums, `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a), "sum_cols")
    }

    /// Column sums, `n x m -> 1 x m`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumRows(a), "sum_rows")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.v(p)).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.v(p)).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> NodeId {
        let out = self.v(a).slice(s![.., start..start + width]).to_owned();
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, count: usize) -> NodeId {
        let out = self.v(a).slice(s![start..start + count, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start), "slice_rows")
    }

    /// Row-wise log-sum-exp, `n x m -> n x 1`, over entries where `mask` is true
    /// (all entries when `mask` is `None`).
    pub fn log_sum_exp_rows(&mut self, a: NodeId, mask: Option<&Array2<bool>>) -> NodeId {
        let x = self.v(a);
        let (n, m) = x.dim();
        let mut weights = Array2::<S>::zeros((n, m));
        let mut out = Array2::<S>::zeros((n, 1));
        for i in 0..n {
            let on = |j: usize| mask.is_none_or(|mk| mk[[i, j]]);
            let mut hi = S::neg_infinity();
            for j in 0..m {
                if on(j) && x[[i, j]] > hi {
                    hi = x[[i, j]];
                }
            }
            let mut total = S::zero();
            for j in 0..m {
                if on(j) {
                    let e = (x[[i, j]] - hi).exp();
                    weights[[i, j]] = e;
                    total += e;
                }
            }
            out[[i, 0]] = hi + total.ln();
            weights.row_mut(i).mapv_inplace(|w| w / total);
        }
        self.push(out, Op::LogSumExpRows(a, weights), "log_sum_exp")
    }

    /// Mean softmax cross-entropy of `logits` (`n x c`) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let x = self.v(logits);
        let (n, c) = x.dim();
        assert_eq!(n, labels.len(), "one label per row");
        let mut probs = Array2::<S>::zeros((n, c));
        let mut loss = S::zero();
        for i in 0..n {
            let row = x.row(i);
            let hi = row.fold(S::neg_infinity(), |a, &b| a.max(b));
            let total = row.fold(S::zero(), |a, &b| a + (b - hi).exp());
            let lse = hi + total.ln();
            for j in 0..c {
                probs[[i, j]] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let mean = loss / S::lit(n as f64);
        self.push(
            Array2::from_elem((1, 1), mean),
            Op::SoftmaxXent(logits, labels.to_vec(), probs),
            "softmax_cross_entropy",
        )
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, store: &ParameterStore<S>, p: AffineParams, x: NodeId) -> NodeId {
        let w = self.param(store, p.weight);
        let b = self.param(store, p.bias);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// One gated recurrent unit step on a batch: `x` is `B x D`, `h` is `B x H`.
    ///
    /// ```text
    /// r  = sigmoid(x Wr + bir + h Ur + bhr)
    /// u  = sigmoid(x Wu + biu + h Uu + bhu)
    /// n  = tanh(x Wn + bin + r * (h Un + bhn))
    /// h' = (1 - u) * n + u * h
    /// ```
    pub fn gru_step(
        &mut self,
        store: &ParameterStore<S>,
        p: GruParams,
        x: NodeId,
        h: NodeId,
    ) -> NodeId {
        let wx = self.param(store, p.w_input);
        let wh = self.param(store, p.w_hidden);
        let bx = self.param(store, p.b_input);
        let bh = self.param(store, p.b_hidden);
        let hd = p.hidden;
        let b = self.nodes[x.0].value.nrows();
        let gx = biased_product(self.v(x), self.v(wx), self.v(bx));
        let gh = biased_product(self.v(h), self.v(wh), self.v(bh));
        let hv = self.nodes[h.0].value.as_standard_layout();
        let hv = hv.as_slice().expect("standard layout");
        let gx = gx.as_slice().expect("standard layout");
        let gh = gh.as_slice().expect("standard layout");

        let mut reset = vec![S::zero(); b * hd];
        let mut update = vec![S::zero(); b * hd];
        let mut candidate = vec![S::zero(); b * hd];
        let mut hidden_candidate_lin = vec![S::zero(); b * hd];
        let mut out = vec![S::zero(); b * hd];
        for r in 0..b {
            let gxr = &gx[r * 3 * hd..(r + 1) * 3 * hd];
            let ghr = &gh[r * 3 * hd..(r + 1) * 3 * hd];
            let o = r * hd;
            for j in 0..hd {
                let rs = sigmoid(gxr[j] + ghr[j]);
                let u = sigmoid(gxr[hd + j] + ghr[hd + j]);
                let hc = ghr[2 * hd + j];
                let n = fast_tanh(gxr[2 * hd + j] + rs * hc);
                reset[o + j] = rs;
                update[o + j] = u;
                candidate[o + j] = n;
                hidden_candidate_lin[o + j] = hc;
                out[o + j] = (S::one() - u) * n + u * hv[o + j];
            }
        }
        let shape = (b, hd);
        let arr = |v: Vec<S>| Array2::from_shape_vec(shape, v).expect("gru shape");
        let cache = Box::new(GruCache {
            reset: arr(reset),
            update: arr(update),
            candidate: arr(candidate),
            hidden_candidate_lin: arr(hidden_candidate_lin),
        });
        self.push(
            arr(out),
            Op::Gru {
                inputs: [x, h, wx, wh, bx, bh],
                cache,
            },
            "gru_step",
        )
    }

    /// Pull gradients of the `1 x 1` node `loss` back to every bound parameter.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Result<Gradients<S>, DiffError> {
        self.check_finite()?;
        let adj = self.backward_all(loss)?;
        let mut out = Gradients::empty(n_params);
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &adj[i] {
                    out.set(pid, g.clone());
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to an arbitrary node (typically an input).
    pub fn gradient_wrt(&self, loss: NodeId, node: NodeId) -> Result<Array2<S>, DiffError> {
        self.check_finite()?;
        let mut adj = self.backward_all(loss)?;
        Ok(adj[node.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(self.nodes[node.0].value.raw_dim())))
    }

    fn backward_all(&self, loss: NodeId) -> Result<Vec<Option<Array2<S>>>, DiffError> {
        let shape = self.nodes[loss.0].value.dim();
        if shape != (1, 1) {
            return Err(DiffError::ShapeMismatch {
                context: "backward needs a scalar loss".into(),
                expected: (1, 1),
                found: shape,
            });
        }
        let mut adj: Vec<Option<Array2<S>>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[loss.0] = Some(Array2::from_elem((1, 1), S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                adj[i] = None;
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let is_leaf = matches!(self.nodes[i].op, Op::Input | Op::Param(_));
            self.pull_back(i, &g, &mut adj);
            if is_leaf {
                adj[i] = Some(g);
            }
        }
        Ok(adj)
    }

    fn pull_back(&self, i: usize, g: &Array2<S>, adj: &mut [Option<Array2<S>>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(adj, *a, g.dot(&val(*b).t()));
                }
                if self.needs(*b) {
                    acc(adj, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    acc(adj, *a, g.dot(val(*b)));
                }
                if self.needs(*b) {
                    acc(adj, *b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(adj, *a, g * val(*b));
                acc(adj, *b, g * val(*a));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(adj, *a, g / bv);
                let mut gb = g * &node.value;
                Zip::from(&mut gb).and(bv).for_each(|x, &d| *x = -*x / d);
                acc(adj, *b, gb);
            }
            Op::AddRow(a, row) => {
                acc(adj, *a, g.clone());
                acc(adj, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, col) => {
                acc(adj, *a, g * val(*col));
                let gc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(adj, *col, gc);
            }
            Op::DivCol(a, col) => {
                let cv = val(*col);
                acc(adj, *a, g / cv);
                let gc = (g * &node.value).sum_axis(Axis(1)).insert_axis(Axis(1));
                let gc = Zip::from(&gc).and(cv).map_collect(|&x, &c| -x / c);
                acc(adj, *col, gc);
            }
            Op::Scale(a, f) => acc(adj, *a, g.mapv(|x| x * *f)),
            Op::AddScalar(a) => acc(adj, *a, g.clone()),
            Op::Unary(a, kind) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = g.clone();
                match kind {
                    Unary::Tanh => Zip::from(&mut d)
                        .and(y)
                        .for_each(|d, &y| *d *= S::one() - y * y),
                    Unary::Sigmoid => Zip::from(&mut d)
                        .and(y)
                        .for_each(|d, &y| *d *= y * (S::one() - y)),
                    Unary::Softplus => Zip::from(&mut d).and(x).for_each(|d, &x| *d *= sigmoid(x)),
                    Unary::Relu => Zip::from(&mut d).and(x).for_each(|d, &x| {
                        if x <= S::zero() {
                            *d = S::zero()
                        }
                    }),
                    Unary::Exp => Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y),
                    Unary::Log => Zip::from(&mut d).and(x).for_each(|d, &x| *d /= x),
                    Unary::Square => Zip::from(&mut d).and(x).for_each(|d, &x| *d *= x + x),
                    Unary::Sqrt => Zip::from(&mut d).and(y).for_each(|d, &y| {
                        *d = if y > S::zero() {
                            *d / (y + y)
                        } else {
                            S::zero()
                        }
                    }),
                    Unary::Abs => Zip::from(&mut d).and(x).for_each(|d, &x| {
                        *d = if x > S::zero() {
                            *d
                        } else if x < S::zero() {
                            -*d
                        } else {
                            S::zero()
                        }
                    }),
                }
                acc(adj, *a, d);
            }
            Op::Atan2(y, x) => {
                let (yv, xv) = (val(*y), val(*x));
                let mut gy = g.clone();
                let mut gx = g.clone();
                Zip::from(&mut gy)
                    .and(&mut gx)
                    .and(yv)
                    .and(xv)
                    .for_each(|gy, gx, &yy, &xx| {
                        let r2 = xx * xx + yy * yy;
                        if r2 > S::zero() {
                            let gg = *gy;
                            *gy = gg * xx / r2;
                            *gx = -gg * yy / r2;
                        } else {
                            *gy = S::zero();
                            *gx = S::zero();
                        }
                    });
                acc(adj, *y, gy);
                acc(adj, *x, gx);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= *lo || x >= *hi {
                        *d = S::zero()
                    }
                });
                acc(adj, *a, d);
            }
            Op::SumAll(a) => {
                let g0 = g[[0, 0]];
                acc(adj, *a, Array2::from_elem(val(*a).raw_dim(), g0));
            }
            Op::SumCols(a) => {
                let shape = val(*a).raw_dim();
                acc(adj, *a, g.broadcast(shape).unwrap().to_owned());
            }
            Op::SumRows(a) => {
                let shape = val(*a).raw_dim();
                acc(adj, *a, g.broadcast(shape).unwrap().to_owned());
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    acc(adj, p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).nrows();
                    acc(adj, p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut full = Array2::zeros(val(*a).raw_dim());
                full.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(adj, *a, full);
            }
            Op::SliceRows(a, start) => {
                let mut full = Array2::zeros(val(*a).raw_dim());
                full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(adj, *a, full);
            }
            Op::LogSumExpRows(a, weights) => acc(adj, *a, weights * g),
            Op::SoftmaxXent(logits, labels, probs) => {
                let n = labels.len();
                let scale = g[[0, 0]] / S::lit(n as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[[i, l]] -= S::one();
                }
                d.mapv_inplace(|x| x * scale);
                acc(adj, *logits, d);
            }
            Op::Gru { inputs, cache } => {
                let [x, h, wx, wh, bx, bh] = *inputs;
                let hv = val(h);
                let (b, hd) = hv.dim();
                let hs = hv.as_standard_layout();
                let hs = hs.as_slice().expect("standard layout");
                let gs = g.as_standard_layout();
                let gs = gs.as_slice().expect("standard layout");
                let c = cache.as_ref();
                let (reset, update, candidate, hcl) = (
                    c.reset.as_slice().expect("owned"),
                    c.update.as_slice().expect("owned"),
                    c.candidate.as_slice().expect("owned"),
                    c.hidden_candidate_lin.as_slice().expect("owned"),
                );
                let mut dgx = vec![S::zero(); b * 3 * hd];
                let mut dgh = vec![S::zero(); b * 3 * hd];
                let mut dh_direct = vec![S::zero(); b * hd];
                for r in 0..b {
                    let o = r * hd;
                    let o3 = r * 3 * hd;
                    for j in 0..hd {
                        let k = o + j;
                        let gout = gs[k];
                        let u = update[k];
                        let n = candidate[k];
                        let rs = reset[k];
                        let dn = gout * (S::one() - u);
                        let du = gout * (hs[k] - n);
                        dh_direct[k] = gout * u;
                        let da_n = dn * (S::one() - n * n);
                        let da_r = da_n * hcl[k] * rs * (S::one() - rs);
                        let da_u = du * u * (S::one() - u);
                        dgx[o3 + j] = da_r;
                        dgx[o3 + hd + j] = da_u;
                        dgx[o3 + 2 * hd + j] = da_n;
                        dgh[o3 + j] = da_r;
                        dgh[o3 + hd + j] = da_u;
                        dgh[o3 + 2 * hd + j] = da_n * rs;
                    }
                }
                let dgx = Array2::from_shape_vec((b, 3 * hd), dgx).expect("gru shape");
                let dgh = Array2::from_shape_vec((b, 3 * hd), dgh).expect("gru shape");
                if self.needs(wx) {
                    acc(adj, wx, val(x).t().dot(&dgx));
                    acc(adj, bx, dgx.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(wh) {
                    acc(adj, wh, hv.t().dot(&dgh));
                    acc(adj, bh, dgh.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(x) {
                    acc(adj, x, dgx.dot(&val(wx).t()));
                }
                if self.needs(h) {
                    let mut dh = Array2::from_shape_vec((b, hd), dh_direct).expect("gru shape");
                    general_mat_mul(S::one(), &dgh, &val(wh).t(), S::one(), &mut dh);
                    acc(adj, h, dh);
                }
            }
        }
    }
}

fn acc<S: Scalar>(adj: &mut [Option<Array2<S>>], id: NodeId, g: Array2<S>) {
    match &mut adj[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn parents<S>(op: &Op<S>) -> Vec<NodeId> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::MatMul(a, b)
        | Op::MatMulT(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddRow(a, b)
        | Op::MulCol(a, b)
        | Op::DivCol(a, b)
        | Op::Atan2(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Unary(a, _)
        | Op::Clamp(a, _, _)
        | Op::SumAll(a)
        | Op::SumCols(a)
        | Op::SumRows(a)
        | Op::SliceCols(a, _)
        | Op::SliceRows(a, _)
        | Op::LogSumExpRows(a, _)
        | Op::SoftmaxXent(a, _, _) => vec![*a],
        Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        Op::Gru { inputs, .. } => inputs.to_vec(),
    }
}

/// `x W + b` with the bias row broadcast, accumulated in one product.
fn biased_product<S: Scalar>(x: ArrayView2<S>, w: ArrayView2<S>, bias: ArrayView2<S>) -> Array2<S> {
    let mut out = Array2::<S>::zeros((x.nrows(), w.ncols()));
    for mut row in out.rows_mut() {
        row.assign(&bias.row(0));
    }
    general_mat_mul(S::one(), &x, &w, S::one(), &mut out);
    out
}

/// `tanh` through one exponential; saturates cleanly at both ends.
#[inline]
fn fast_tanh<S: Scalar>(x: S) -> S {
    let two = S::one() + S::one();
    S::one() - two / ((two * x).exp() + S::one())
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    if x > S::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}
