//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the tape through [`Graph::param`], which loads the current value from a
//! [`ParamStore`] once per graph; [`Graph::backward`] then returns gradients
//! keyed by parameter name.
//!
//! Every value is a 2-D matrix. Scalars are `1x1`, row vectors `1xn`.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{GradStore, ParamStore};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Sigmoid,
    Softplus,
    Relu,
    Gelu,
    Sin,
    Cos,
    Exp,
    Ln,
    Square,
    SmoothL1,
    ClampMin(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Broadcast(usize),
    Scale(usize, f64),
    Offset(usize),
    MulConst(usize, Array2<f64>),
    Unary(usize, Unary),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm(usize, f64),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Relu => x.max(0.0),
        Unary::Gelu => gelu(x),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Square => x * x,
        Unary::SmoothL1 => smooth_l1(x),
        Unary::ClampMin(m) => x.max(m),
    }
}

fn unary_grad(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Softplus => sigmoid(x),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Gelu => gelu_grad(x),
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Square => 2.0 * x,
        Unary::SmoothL1 => x.clamp(-1.0, 1.0),
        Unary::ClampMin(m) => {
            if x > m {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn layer_norm_rows(x: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn reduce_to_shape(grad: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let mut g = grad.clone();
    if rows == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if cols == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// A free leaf that receives gradient but is not backed by a parameter store.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Load a named parameter, reusing the same leaf on repeated calls.
    ///
    /// Panics if `name` is missing from `store`; callers register every
    /// parameter before building a graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&id) = self.params.get(name) {
            return Var(id);
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v.0);
        v
    }

    /// Copy of `v` cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::MatMul(a.0, b.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        let rg = self.rg(a.0);
        self.push(value, Op::Transpose(a.0), rg)
    }

    fn binary_shape_check(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check(a, b, "add");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check(a, b, "sub");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check(a, b, "mul");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Mul(a.0, b.0), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check(a, b, "div");
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Div(a.0, b.0), rg)
    }

    /// Broadcast a `1x1`, `1xn` or `mx1` node to `rows x cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = &self.nodes[a.0].value;
        let (r, c) = src.dim();
        assert!(
            (r == 1 || r == rows) && (c == 1 || c == cols),
            "cannot broadcast {r}x{c} to {rows}x{cols}"
        );
        let value = src
            .broadcast((rows, cols))
            .expect("broadcast shape")
            .to_owned();
        let rg = self.rg(a.0);
        self.push(value, Op::Broadcast(a.0), rg)
    }

    /// `a + row` with `row` a `1xn` vector added to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        let b = self.broadcast(row, r, c);
        self.add(a, b)
    }

    /// `a * row` with `row` a `1xn` vector multiplied into every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        let b = self.broadcast(row, r, c);
        self.mul(a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = &self.nodes[a.0].value * k;
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, k), rg)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let value = &self.nodes[a.0].value + k;
        let rg = self.rg(a.0);
        self.push(value, Op::Offset(a.0), rg)
    }

    /// Elementwise product with a fixed matrix (masks, dropout keep-scales).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const: shape mismatch");
        let value = &self.nodes[a.0].value * &c;
        let rg = self.rg(a.0);
        self.push(value, Op::MulConst(a.0, c), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| unary_forward(kind, x));
        let rg = self.rg(a.0);
        self.push(value, Op::Unary(a.0, kind), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    /// Huber loss with transition point 1, applied elementwise.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        self.unary(a, Unary::SmoothL1)
    }
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.unary(a, Unary::ClampMin(min))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(&self.nodes[a.0].value);
        let rg = self.rg(a.0);
        self.push(value, Op::SoftmaxRows(a.0), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(&self.nodes[a.0].value);
        let rg = self.rg(a.0);
        self.push(value, Op::LogSoftmaxRows(a.0), rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let value = layer_norm_rows(&self.nodes[a.0].value, eps);
        let rg = self.rg(a.0);
        self.push(value, Op::LayerNorm(a.0, eps), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        let rg = self.rg(a.0);
        self.push(value, Op::SliceCols(a.0, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.nodes[a.0].value.select(Axis(0), rows);
        let rg = self.rg(a.0);
        self.push(value, Op::SelectRows(a.0, rows.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let rg = self.rg(a.0);
        self.push(value, Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let rg = self.rg(a.0);
        self.push(value, Op::Mean(a.0), rg)
    }

    /// Column sums as a `1xn` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a.0);
        self.push(value, Op::SumRows(a.0), rg)
    }

    /// Column means as a `1xn` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0 as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an `mx1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.transpose(a);
        let s = self.sum_rows(t);
        self.transpose(s)
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every
    /// parameter loaded through [`Graph::param`].
    pub fn backward(&self, loss: Var) -> GradStore {
        let all = self.backward_all(loss);
        let mut out = GradStore::default();
        for (name, &id) in &self.params {
            if let Some(g) = &all[id] {
                out.accumulate(name, g, 1.0);
            }
        }
        out
    }

    /// Gradient with respect to an arbitrary node.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Option<Array2<f64>> {
        self.backward_all(loss).swap_remove(wrt.0)
    }

    fn backward_all(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.nodes[*b].value.t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.nodes[*a].value.t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * &self.nodes[*b].value);
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, &g * &self.nodes[*a].value);
                    }
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[*b].value;
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g / bv);
                    }
                    if self.rg(*b) {
                        let mut gb = &g * &node.value;
                        Zip::from(&mut gb).and(bv).for_each(|x, &bb| *x = -*x / bb);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Broadcast(a) => {
                    let (r, c) = self.nodes[*a].value.dim();
                    acc(&mut grads, *a, reduce_to_shape(&g, r, c));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::MulConst(a, c) => acc(&mut grads, *a, g * c),
                Op::Unary(a, kind) => {
                    let x = &self.nodes[*a].value;
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(x)
                        .and(&node.value)
                        .for_each(|gv, &xv, &yv| *gv *= unary_grad(*kind, xv, yv));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|r, &yy| *r -= yy * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let total = row.sum();
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|r, &ly| *r -= ly.exp() * total);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, eps) => {
                    let x = &self.nodes[*a].value;
                    let xhat = &node.value;
                    let mut ga = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let xr = x.row(i);
                        let n = xr.len() as f64;
                        let mean = xr.sum() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let mean_g = gr.sum() / n;
                        let mean_gh = gr.iter().zip(hr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..xr.len() {
                            ga[[i, j]] = inv * (gr[j] - mean_g - hr[j] * mean_gh);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                    let len = g.ncols();
                    ga.slice_mut(s![.., *start..*start + len]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::SelectRows(a, rows) => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let dim = self.nodes[*a].value.dim();
                    acc(&mut grads, *a, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let v = &self.nodes[*a].value;
                    acc(&mut grads, *a, Array2::from_elem(v.dim(), g[[0, 0]] / v.len() as f64));
                }
                Op::SumRows(a) => {
                    let dim = self.nodes[*a].value.dim();
                    let ga = g.broadcast(dim).expect("sum_rows grad").to_owned();
                    acc(&mut grads, *a, ga);
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let eps = 1e-6;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut p = x.clone();
            p[[i, j]] += eps;
            let mut m = x.clone();
            m[[i, j]] -= eps;
            out[[i, j]] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        out
    }

    fn check(x: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let loss = build(&mut g, v);
        let analytic = g.grad_of(loss, v).unwrap();
        let numeric = numeric_grad(&x, |p| {
            let mut g = Graph::new();
            let v = g.input(p.clone());
            let l = build(&mut g, v);
            g.scalar(l)
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.5, 0.1, -0.4]]
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        for op in 0..10 {
            check(sample(), |g, v| {
                let y = match op {
                    0 => g.sigmoid(v),
                    1 => g.softplus(v),
                    2 => g.gelu(v),
                    3 => g.sin(v),
                    4 => g.cos(v),
                    5 => g.exp(v),
                    6 => g.square(v),
                    7 => g.smooth_l1(v),
                    8 => {
                        let e = g.exp(v);
                        g.ln(e)
                    }
                    _ => g.relu(v),
                };
                let w = g.constant(array![[1.0, 2.0, -1.0], [0.5, -3.0, 2.0]]);
                let p = g.mul(y, w);
                g.sum(p)
            });
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check(sample(), |g, v| {
            let t = g.transpose(v);
            let m = g.matmul(v, t);
            let sm = g.softmax_rows(m);
            let ln = g.layer_norm(v, 1e-5);
            let sl = g.slice_cols(ln, 1, 2);
            let cat = g.concat_cols(&[sl, v]);
            let sel = g.select_rows(cat, &[1, 0, 1]);
            let cs = g.sum_rows(sel);
            let sq = g.square(cs);
            let a = g.sum(sq);
            let b = g.mean(sm);
            let w = g.constant(array![[2.0, -1.0], [0.5, 3.0]]);
            let smw = g.mul(sm, w);
            let c = g.sum(smw);
            let ab = g.add(a, b);
            g.add(ab, c)
        });
    }

    #[test]
    fn broadcast_and_division_match_finite_differences() {
        check(array![[0.4, 1.3, -0.8]], |g, v| {
            let sc = g.slice_cols(v, 0, 1);
            let big = g.broadcast(sc, 2, 3);
            let row = g.broadcast(v, 2, 3);
            let den = g.offset(row, 3.0);
            let q = g.div(big, den);
            let ls = g.log_softmax_rows(q);
            let w = g.constant(array![[1.0, 0.0, 2.0], [0.0, -1.0, 1.0]]);
            let p = g.mul(ls, w);
            g.sum(p)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = array![[1.0, 2.0, 3.0], [-5.0, 0.0, 100.0]];
        let y = softmax_rows(&x);
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_rows(&(&x + 7.5));
        for (a, b) in y.iter().zip(shifted.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let v = g.input(array![[2.0]]);
        let d = g.detach(v);
        let p = g.mul(v, d);
        let gv = g.grad_of(p, v).unwrap();
        assert_eq!(gv[[0, 0]], 2.0);
    }
}
