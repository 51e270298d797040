use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::{Float, ParamGrads, ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// User-defined differentiable operation.
///
/// `backward` returns one gradient per input, in input order. Gradients for
/// inputs that do not require them are discarded by the graph.
pub trait CustomOp<F: Float>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&mut self, inputs: &[&Array2<F>]) -> Array2<F>;
    fn backward(&self, inputs: &[&Array2<F>], output: &Array2<F>, grad_output: &Array2<F>) -> Vec<Array2<F>>;
}

enum Op<F: Float> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<F>>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    Custom(Box<dyn CustomOp<F>>, Vec<Var>),
}

struct Node<F: Float> {
    value: Option<Array2<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// A tape of operations over matrices; values are computed eagerly.
pub struct Graph<'p, F: Float> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`].
pub struct Grads<F: Float> {
    nodes: Vec<Option<Array2<F>>>,
    params: ParamGrads<F>,
}

impl<F: Float> Grads<F> {
    /// Gradient reaching `v`, if `v` is a leaf that requires gradients.
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &ParamGrads<F> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<F> {
        self.params
    }
}

impl<'p, F: Float> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("non-param node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Input whose gradient is reported by [`Grads::wrt`].
    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// `x + row`, broadcasting a `1 × n` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let value = self.value(x) + self.value(row);
        let ng = self.ng(&[x, row]);
        self.push(value, Op::AddRow(x, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Scales row `i` of `x` by `col[i, 0]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (rows, _) = self.shape(x);
        assert_eq!(self.shape(col), (rows, 1), "mul_col expects an n × 1 column");
        let value = self.value(x) * self.value(col);
        let ng = self.ng(&[x, col]);
        self.push(value, Op::MulCol(x, col), ng)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).mapv(|v| v * c);
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale(x, c), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        let ng = self.ng(&[x]);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(softplus);
        let ng = self.ng(&[x]);
        self.push(value, Op::Softplus(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = F::lit(xv.ncols() as f64);
        let eps = F::lit(eps);
        let mut xhat = xv.to_owned();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Scaled dot-product attention with `heads` heads over the column
    /// blocks of `q`, `k`, `v`. With `causal`, position `i` attends only to
    /// positions `≤ i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (t, d) = self.shape(q);
        assert_eq!(self.shape(k), (t, d));
        assert_eq!(self.shape(v), (t, d));
        assert_eq!(d % heads, 0, "width must divide into heads");
        let dh = d / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::<F>::zeros((t, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = qv.slice(cols).dot(&kv.slice(cols).t());
            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                for x in row.iter_mut() {
                    *x = *x * scale;
                }
                if causal {
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = F::zero());
                } else {
                    softmax_in_place(row);
                }
            }
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        let ng = self.ng(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, probs }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(&[x]);
        self.push(value, Op::SliceRows(x, start, end), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let ng = self.ng(&[x]);
        self.push(value, Op::SliceCols(x, start, end), ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let ng = self.ng(&[x]);
        self.push(value, Op::MeanRows(x), ng)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let value = t.select(Axis(0), ids);
        let ng = self.ng(&[table]);
        self.push(value, Op::Gather(table, ids.to_vec()), ng)
    }

    pub fn custom(&mut self, inputs: &[Var], mut op: Box<dyn CustomOp<F>>) -> Var {
        let values: Vec<&Array2<F>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&values);
        let ng = self.ng(inputs);
        self.push(value, Op::Custom(op, inputs.to_vec()), ng)
    }

    /// Reverse pass seeded with `d(objective)/d(var)` for each `(var, grad)`.
    pub fn backward(&self, seeds: &[(Var, Array2<F>)]) -> Grads<F> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<F>>> = vec![None; n];
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "seed gradient shape");
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut params = ParamGrads::new(self.params.len());
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    params.accumulate(*id, &g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, || g.clone());
                    self.send(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.send(&mut grads, *a, || g.clone());
                    self.send(&mut grads, *b, || g.mapv(|x| -x));
                }
                Op::AddRow(x, row) => {
                    self.send(&mut grads, *row, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    self.send(&mut grads, *x, || g.clone());
                }
                Op::Mul(a, b) => {
                    self.send(&mut grads, *a, || &g * self.value(*b));
                    self.send(&mut grads, *b, || &g * self.value(*a));
                }
                Op::MulCol(x, col) => {
                    self.send(&mut grads, *col, || (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                    self.send(&mut grads, *x, || &g * self.value(*col));
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.send(&mut grads, *x, || g.mapv(|v| v * c));
                }
                Op::Gelu(x) => {
                    self.send(&mut grads, *x, || {
                        let mut out = g.clone();
                        Zip::from(&mut out).and(self.value(*x)).for_each(|o, &xv| *o = *o * gelu_grad(xv));
                        out
                    });
                }
                Op::Softplus(x) => {
                    self.send(&mut grads, *x, || {
                        let mut out = g.clone();
                        Zip::from(&mut out).and(self.value(*x)).for_each(|o, &xv| *o = *o * sigmoid(xv));
                        out
                    });
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.as_ref().expect("value");
                    self.send(&mut grads, *x, || softmax_backward(y, &g));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    self.send(&mut grads, *beta, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    self.send(&mut grads, *gamma, || (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    if self.needs(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let n = F::lit(xhat.ncols() as f64);
                        let mut dx = Array2::<F>::zeros(g.dim());
                        for (r, ((mut out, dh), xh)) in dx.rows_mut().into_iter().zip(dxhat.rows()).zip(xhat.rows()).enumerate() {
                            let mean_dh = dh.sum() / n;
                            let mean_dhx = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
                            for ((o, &a), &b) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
                                *o = rstd[r] * (a - mean_dh - b * mean_dhx);
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (t, d) = g.dim();
                    let dh = d / heads;
                    let scale = F::lit(1.0 / (dh as f64).sqrt());
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = Array2::<F>::zeros((t, d));
                    let mut dk = Array2::<F>::zeros((t, d));
                    let mut dv = Array2::<F>::zeros((t, d));
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = softmax_backward(p, &dp);
                        ds.mapv_inplace(|x| x * scale);
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    if self.needs(*q) {
                        accumulate(&mut grads[q.0], dq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads[k.0], dk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads[v.0], dv);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.shape(*p).0;
                        let end = start + rows;
                        self.send(&mut grads, *p, || g.slice(s![start..end, ..]).to_owned());
                        start = end;
                    }
                }
                Op::SliceRows(x, start, end) => {
                    self.send(&mut grads, *x, || {
                        let mut full = Array2::zeros(self.shape(*x));
                        full.slice_mut(s![*start..*end, ..]).assign(&g);
                        full
                    });
                }
                Op::SliceCols(x, start, end) => {
                    self.send(&mut grads, *x, || {
                        let mut full = Array2::zeros(self.shape(*x));
                        full.slice_mut(s![.., *start..*end]).assign(&g);
                        full
                    });
                }
                Op::MeanRows(x) => {
                    self.send(&mut grads, *x, || {
                        let (rows, cols) = self.shape(*x);
                        let inv = F::lit(1.0 / rows as f64);
                        let row = g.mapv(|v| v * inv);
                        row.broadcast((rows, cols)).expect("broadcast").to_owned()
                    });
                }
                Op::Gather(table, ids) => {
                    self.send(&mut grads, *table, || {
                        let mut full = Array2::<F>::zeros(self.shape(*table));
                        for (r, &id) in ids.iter().enumerate() {
                            let mut dst = full.row_mut(id);
                            dst += &g.row(r);
                        }
                        full
                    });
                }
                Op::Custom(op, inputs) => {
                    let values: Vec<&Array2<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let out = node.value.as_ref().expect("value");
                    let input_grads = op.backward(&values, out, &g);
                    assert_eq!(input_grads.len(), inputs.len(), "{}: gradient count", op.name());
                    for (v, ig) in inputs.iter().zip(input_grads) {
                        if self.needs(*v) {
                            assert_eq!(ig.dim(), self.shape(*v), "{}: gradient shape", op.name());
                            accumulate(&mut grads[v.0], ig);
                        }
                    }
                }
            }
        }
        Grads { nodes: grads, params }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn send(&self, grads: &mut [Option<Array2<F>>], v: Var, g: impl FnOnce() -> Array2<F>) {
        if self.needs(v) {
            accumulate(&mut grads[v.0], g());
        }
    }
}

fn accumulate<F: Float>(slot: &mut Option<Array2<F>>, g: Array2<F>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    let inner = F::lit(GELU_K) * (x + F::lit(GELU_C) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    let inner = F::lit(GELU_K) * (x + F::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = F::lit(GELU_K) * (F::one() + F::lit(3.0 * GELU_C) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

pub(crate) fn softplus<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// `dx = y ⊙ (g − rowsum(g ⊙ y))` for `y = softmax(x)` row-wise.
fn softmax_backward<F: Float>(y: &Array2<F>, g: &Array2<F>) -> Array2<F> {
    let mut out = g.clone();
    for (mut o, yr) in out.rows_mut().into_iter().zip(y.rows()) {
        let dot = o.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<F>();
        for (ov, &yv) in o.iter_mut().zip(yr.iter()) {
            *ov = yv * (*ov - dot);
        }
    }
    out
}
