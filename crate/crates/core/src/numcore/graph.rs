//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records operations in creation order, which is already a
//! topological order, so backward is a single reverse sweep. Parameter values
//! are borrowed from their [`ParamStore`] rather than copied; gradients come
//! back as a detached [`Gradients`] value so independent graphs over the same
//! parameters can run on separate threads.

use std::borrow::Cow;

use rand::Rng;

use super::tensor::{ParamGrads, ParamId, ParamStore, Scalar, Tensor};
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    Map { x: Var, derivative: fn(T) -> T },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<i64>, probs: Vec<T>, count: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
}

struct Node<'a, T: Clone> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

fn shape_err(msg: String) -> TensorError {
    TensorError::ShapeMismatch(msg)
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("tensors have at least one dim");
    (shape.iter().product::<usize>() / cols, cols)
}

// C[m,n] = A[m,k] B[k,n]
fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

// dA[m,k] += dC[m,n] B[k,n]^T
fn mm_acc_nt<T: Scalar>(dc: &[T], b: &[T], m: usize, n: usize, k: usize, da: &mut [T]) {
    for i in 0..m {
        let dci = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let s: T = dci.iter().zip(&b[p * n..(p + 1) * n]).map(|(&x, &y)| x * y).sum();
            da[i * k + p] += s;
        }
    }
}

// dB[k,n] += A[m,k]^T dC[m,n]
fn mm_acc_tn<T: Scalar>(a: &[T], dc: &[T], m: usize, k: usize, n: usize, db: &mut [T]) {
    for i in 0..m {
        let dci = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (d, &g) in db[p * n..(p + 1) * n].iter_mut().zip(dci) {
                *d += av * g;
            }
        }
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * a * x * x);
    (y, dy)
}

/// Row-wise softmax with max subtraction; `mask[j] == false` forces column j to 0.
fn softmax_rows<T: Scalar>(x: &[T], cols: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let max = (0..cols)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            continue;
        }
        let mut total = T::zero();
        for j in 0..cols {
            if keep(j) {
                o[j] = (row[j] - max).exp();
                total += o[j];
            }
        }
        o.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Leaf borrowing a parameter's values; its gradient is reported under `id`.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf borrowing a free-standing tensor; gradients follow its `requires_grad` flag.
    pub fn input(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != data.len() || shape.is_empty() {
            return Err(shape_err(format!("constant of shape {shape:?} with {} values", data.len())));
        }
        Ok(self.push(shape, Cow::Owned(data), Op::Leaf, &[]))
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.mat_dims(a, "matmul lhs")?;
        let (k2, n) = self.mat_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err(format!("matmul inner dims {m}x{k} · {k2}x{n}")));
        }
        let out = mm(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.mat_dims(a, "transpose")?;
        let v = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], Cow::Owned(out), Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-n vector to every row of `[.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(a));
        if self.value(row).len() != cols {
            return Err(shape_err(format!("add_row: {:?} + {:?}", self.shape(a), self.shape(row))));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Scale(a, factor), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_parts(x).0).collect();
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Tanh(a), &[a])
    }

    /// Elementwise `f` with a caller-supplied derivative `df` (evaluated at the input).
    pub fn map(&mut self, a: Var, f: fn(T) -> T, df: fn(T) -> T) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(
            self.shape(a).to_vec(),
            Cow::Owned(out),
            Op::Map { x: a, derivative: df },
            &[a],
        )
    }

    /// Inverted dropout with a mask drawn from `rng`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var, TensorError> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = self.constant(self.shape(a).to_vec(), mask)?;
        self.mul(a, m)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(a));
        let out = softmax_rows(self.value(a), cols, None);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Softmax(a), &[a])
    }

    /// Softmax over the last axis where columns with `key_mask[j] == false`
    /// get probability exactly zero (additive −∞ before normalization).
    pub fn masked_softmax(&mut self, a: Var, key_mask: &[bool]) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(a));
        if key_mask.len() != cols {
            return Err(shape_err(format!("mask of {} for {cols} columns", key_mask.len())));
        }
        let out = softmax_rows(self.value(a), cols, Some(key_mask));
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Softmax(a), &[a]))
    }

    /// Per-row normalization with population variance, then `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err(format!(
                "layer_norm over {d} features with gain {:?} / bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let dn = T::lit(d as f64);
        let mut out = Vec::with_capacity(xs.len());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in xs.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + T::lit(eps)).sqrt();
            out.extend(row.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]));
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean negative log-softmax over rows whose target is not −1. Returns 0
    /// (with zero gradient) when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64]) -> Result<Var, TensorError> {
        let (rows, v) = rows_cols(self.shape(logits));
        if targets.len() != rows {
            return Err(shape_err(format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t < -1 || t >= v as i64) {
            return Err(TensorError::TargetOutOfRange { target: t, classes: v });
        }
        let probs = softmax_rows(self.value(logits), v, None);
        let lv = self.value(logits);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[t as usize]).as_f64();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![T::lit(loss)]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.mat_dims(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(shape_err("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err(format!("gather_rows index {bad} out of {rows} rows")));
        }
        let xs = self.value(x);
        let out = idx.iter().flat_map(|&i| xs[i * cols..(i + 1) * cols].iter().copied()).collect();
        Ok(self.push(
            vec![idx.len(), cols],
            Cow::Owned(out),
            Op::GatherRows { x, idx: idx.to_vec() },
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let (_, cols) = self.mat_dims(*parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_rows")?;
            if c != cols {
                return Err(shape_err(format!("concat_rows: {c} vs {cols} columns")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, cols], Cow::Owned(out), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.mat_dims(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(shape_err(format!("slice_cols {start}..{} of {cols}", start + len)));
        }
        let xs = self.value(x);
        let out = (0..rows)
            .flat_map(|r| xs[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        Ok(self.push(vec![rows, len], Cow::Owned(out), Op::SliceCols { x, start, len }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let (rows, _) = self.mat_dims(*parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err(format!("concat_cols: {r} vs {rows} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![rows, total], Cow::Owned(out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a), &[a])
    }

    /// Reverse sweep from a one-element `loss`. Each call starts from fresh
    /// node gradients, so repeated calls yield identical results that callers
    /// may accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, leaves: self.leaf_params() });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            leaves: self.leaf_params(),
        })
    }

    fn leaf_params(&self) -> Vec<(ParamId, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect()
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let nn = nodes[b.0].shape[1];
                if wants(*a) {
                    mm_acc_nt(g, &nodes[b.0].value, m, nn, k, acc!(*a));
                }
                if wants(*b) {
                    mm_acc_tn(&nodes[a.0].value, g, m, k, nn, acc!(*b));
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let da = acc!(*a);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if wants(*row) {
                    let cols = nodes[row.0].value.len();
                    let dr = acc!(*row);
                    for chunk in g.chunks(cols) {
                        dr.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    acc!(*a).iter_mut().zip(g.iter().zip(bv.iter())).for_each(|(d, (&x, &y))| *d += x * y);
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    acc!(*b).iter_mut().zip(g.iter().zip(av.iter())).for_each(|(d, (&x, &y))| *d += x * y);
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, &x)| *d += x * *f);
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let av = &nodes[a.0].value;
                    acc!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(av.iter()))
                        .for_each(|(d, (&x, &inp))| *d += x * gelu_parts(inp).1);
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let y = &node.value;
                    acc!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(y.iter()))
                        .for_each(|(d, (&x, &yv))| *d += x * (T::one() - yv * yv));
                }
            }
            Op::Map { x, derivative } => {
                if wants(*x) {
                    let xv = &nodes[x.0].value;
                    acc!(*x)
                        .iter_mut()
                        .zip(g.iter().zip(xv.iter()))
                        .for_each(|(d, (&gv, &inp))| *d += gv * derivative(inp));
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let (_, cols) = rows_cols(&node.shape);
                    let y = &node.value;
                    let da = acc!(*a);
                    for r in 0..y.len() / cols {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (j, d) in da[span].iter_mut().enumerate() {
                            *d += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let (_, d) = rows_cols(&node.shape);
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                let dn = T::lit(d as f64);
                let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];
                if wants(*x) {
                    let dx = acc!(*x);
                    for r in 0..mean.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat(r, j);
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (gr[j] * gv[j] - m1 - xhat(r, j) * m2);
                        }
                    }
                }
                if wants(*gain) {
                    let dg = acc!(*gain);
                    for r in 0..mean.len() {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat(r, j);
                        }
                    }
                }
                if wants(*bias) {
                    let db = acc!(*bias);
                    for chunk in g.chunks(d) {
                        db.iter_mut().zip(chunk).for_each(|(b, &x)| *b += x);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if wants(*logits) && *count > 0 {
                    let v = *nodes[logits.0].shape.last().expect("matrix");
                    let scale = g[0] / T::lit(*count as f64);
                    let dl = acc!(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j as i64 == t { T::one() } else { T::zero() };
                            dl[r * v + j] += (probs[r * v + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if wants(*x) {
                    let cols = nodes[x.0].shape[1];
                    let dx = acc!(*x);
                    for (k, &i) in idx.iter().enumerate() {
                        dx[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                            .for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(p) {
                        acc!(p).iter_mut().zip(&g[offset..offset + len]).for_each(|(d, &x)| *d += x);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start, len } => {
                if wants(*x) {
                    let cols = nodes[x.0].shape[1];
                    let dx = acc!(*x);
                    for (r, chunk) in g.chunks(*len).enumerate() {
                        dx[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(chunk)
                            .for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    if wants(p) {
                        let dp = acc!(p);
                        for r in 0..node.shape[0] {
                            dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                                .for_each(|(d, &x)| *d += x);
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    acc!(*a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

fn slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<'_, T>], v: Var) -> &'g mut Vec<T> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Result of a backward sweep: gradients for every leaf that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    leaves: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Folds leaf gradients into per-parameter buffers; a parameter used by
    /// several leaves receives their sum.
    pub fn param_grads(&self, n_params: usize) -> ParamGrads<T> {
        let mut out = ParamGrads::empty(n_params);
        for &(pid, node) in &self.leaves {
            if let Some(g) = &self.grads[node] {
                match &mut out.0[pid.0] {
                    Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
