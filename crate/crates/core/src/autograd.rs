//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] is built per sample: every operation appends a node holding
//! its forward value, and [`Graph::backward`] walks the tape in reverse.
//! Parameters are read in place from a borrowed [`ParamStore`], so building a
//! graph never copies weights. Nodes that depend on no trainable parameter
//! are never visited on the way back.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{Grads, Matrix, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    MeanRows(Var),
    SumRows(Var),
    SumAll(Var),
    Mse(Var, Var),
    CosineDistance(Var, Var, f64),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<'a> Graph<'a> {
    /// Graph that records gradients for every trainable parameter it touches.
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only graph; `backward` returns empty gradients.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const, &[])
    }

    pub fn row_constant(&mut self, row: &[f64]) -> Var {
        let m = Array2::from_shape_vec((1, row.len()), row.to_vec()).expect("row shape");
        self.constant(m)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.grad_enabled && self.store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalization with `1×n` affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
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

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_axis(Axis(0)).expect("mean of empty matrix").insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Column sums as a `1×n` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), &[a])
    }

    /// Mean of squared differences over all entries, as a `1×1` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "mse operands differ in shape");
        let n = av.len() as f64;
        let s = av.iter().zip(bv.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        self.push(Array2::from_elem((1, 1), s), Op::Mse(a, b), &[a, b])
    }

    /// `1 − a·b / max(‖a‖‖b‖, eps)` over the flattened operands.
    pub fn cosine_distance(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let d = 1.0 - cosine_parts(self.value(a), self.value(b), eps).cos;
        self.push(Array2::from_elem((1, 1), d), Op::CosineDistance(a, b, eps), &[a, b])
    }

    /// Reverse sweep from a `1×1` output. Returns gradients for every
    /// trainable parameter reached.
    pub fn backward(&self, output: Var) -> Grads {
        let mut grads = vec![None; self.store.len()];
        if !self.nodes[output.0].requires_grad {
            return Grads::from_vec(grads);
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Array2::ones(self.value(output).dim()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = adj[idx].take() else { continue };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    grads[id.0] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = dy.dot(&self.value(*b).t());
                        acc(&mut adj, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&dy);
                        acc(&mut adj, *b, gb);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.needs(*a) {
                        let ga = dy.dot(self.value(*b));
                        acc(&mut adj, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = dy.t().dot(self.value(*a));
                        acc(&mut adj, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        acc(&mut adj, *b, dy.clone());
                    }
                    if self.needs(*a) {
                        acc(&mut adj, *a, dy);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        acc(&mut adj, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*a) {
                        acc(&mut adj, *a, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        acc(&mut adj, *b, -&dy);
                    }
                    if self.needs(*a) {
                        acc(&mut adj, *a, dy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut adj, *a, &dy * self.value(*b));
                    }
                    if self.needs(*b) {
                        acc(&mut adj, *b, &dy * self.value(*a));
                    }
                }
                Op::Scale(a, c) => {
                    acc(&mut adj, *a, dy * *c);
                }
                Op::Gelu(a) => {
                    let mut g = self.value(*a).mapv(|x| {
                        let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
                    });
                    g *= &dy;
                    acc(&mut adj, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(idx));
                    let mut g = &dy * y;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.sum();
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv * dot);
                    }
                    acc(&mut adj, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.needs(*beta) {
                        acc(&mut adj, *beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*gamma) {
                        let gg = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut adj, *gamma, gg);
                    }
                    if self.needs(*x) {
                        let dxhat = &dy * self.value(*gamma);
                        let n = dxhat.ncols() as f64;
                        let mut gx = dxhat.clone();
                        for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                            let xr = xhat.row(r);
                            let mean_d = row.sum() / n;
                            let mean_dx = row.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                            let rs = rstd[r];
                            row.zip_mut_with(&xr, |v, &xh| *v = rs * (*v - mean_d - xh * mean_dx));
                        }
                        acc(&mut adj, *x, gx);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        if self.needs(p) {
                            acc(&mut adj, p, dy.slice(s![start..start + rows, ..]).to_owned());
                        }
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        if self.needs(p) {
                            acc(&mut adj, p, dy.slice(s![.., start..start + cols]).to_owned());
                        }
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    g.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(&dy);
                    acc(&mut adj, *a, g);
                }
                Op::SliceCols(a, start) => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    acc(&mut adj, *a, g);
                }
                Op::Transpose(a) => {
                    acc(&mut adj, *a, dy.t().to_owned());
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.value(*a).dim();
                    let g = dy.broadcast((r, c)).expect("row broadcast").mapv(|v| v / r as f64);
                    acc(&mut adj, *a, g);
                }
                Op::SumRows(a) => {
                    let dim = self.value(*a).dim();
                    acc(&mut adj, *a, dy.broadcast(dim).expect("row broadcast").to_owned());
                }
                Op::SumAll(a) => {
                    acc(&mut adj, *a, Array2::from_elem(self.value(*a).dim(), dy[[0, 0]]));
                }
                Op::Mse(a, b) => {
                    let n = self.value(*a).len() as f64;
                    let diff = self.value(*a) - self.value(*b);
                    let ga = diff * (2.0 * dy[[0, 0]] / n);
                    if self.needs(*b) {
                        acc(&mut adj, *b, -&ga);
                    }
                    if self.needs(*a) {
                        acc(&mut adj, *a, ga);
                    }
                }
                Op::CosineDistance(a, b, eps) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let parts = cosine_parts(av, bv, *eps);
                    let up = -dy[[0, 0]];
                    if self.needs(*a) {
                        acc(&mut adj, *a, parts.grad_wrt_first(av, bv) * up);
                    }
                    if self.needs(*b) {
                        acc(&mut adj, *b, parts.grad_wrt_second(av, bv) * up);
                    }
                }
            }
        }
        Grads::from_vec(grads)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(m) => *m += &g,
        slot @ None => *slot = Some(g),
    }
}

struct CosineParts {
    na: f64,
    nb: f64,
    denom: f64,
    guarded: bool,
    cos: f64,
}

fn cosine_parts(a: &Matrix, b: &Matrix, eps: f64) -> CosineParts {
    assert_eq!(a.len(), b.len(), "cosine operands differ in length");
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let raw = na * nb;
    let guarded = raw <= eps;
    let denom = if guarded { eps } else { raw };
    CosineParts {
        na,
        nb,
        denom,
        guarded,
        cos: dot / denom,
    }
}

impl CosineParts {
    // d cos / d a
    fn grad_wrt_first(&self, a: &Matrix, b: &Matrix) -> Matrix {
        if self.guarded {
            return b / self.denom;
        }
        let mut g = b / self.denom;
        g.zip_mut_with(a, |gv, &av| *gv -= self.cos * av / (self.na * self.na));
        g
    }

    fn grad_wrt_second(&self, a: &Matrix, b: &Matrix) -> Matrix {
        if self.guarded {
            return a / self.denom;
        }
        let mut g = a / self.denom;
        g.zip_mut_with(b, |gv, &bv| *gv -= self.cos * bv / (self.nb * self.nb));
        g
    }
}

/// Cosine similarity with the `max(‖a‖‖b‖, eps)` guard used throughout.
pub fn cosine_similarity(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(eps)
}
