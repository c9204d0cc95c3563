//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Operations are recorded on a [`Tape`] in execution order and replayed in
//! exact reverse order by [`Tape::backward`]. Handles to recorded values are
//! plain [`Var`] ids, so graphs are built with `&mut Tape` calls:
//!
//! ```
//! use stegsplat::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```
//!
//! Only row-wise bias addition and per-row column scaling broadcast; every
//! other binary op requires identical shapes. Modules that need a fused
//! primitive (the rasterizer, SSIM) plug in through [`CustomOp`].

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op} received a non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("zero-norm group in normalize")]
    ZeroNorm,
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A user-defined differentiable primitive.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient of the root with respect to the output, and returns one optional
/// gradient per input (same shapes as the inputs).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor)
        -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Linear(Var, Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Softmax(Var),
    SoftmaxRows(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MulCol(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    NormalizeGroups(Var, usize),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `x[n,d_in] · w[d_in,d_out] + b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, din) = xv
            .dims2()
            .ok_or_else(|| shape_err("linear", format!("x must be 2-D, got {:?}", xv.shape)))?;
        let (win, dout) = wv
            .dims2()
            .ok_or_else(|| shape_err("linear", format!("w must be 2-D, got {:?}", wv.shape)))?;
        if win != din {
            return Err(shape_err("linear", format!("x is [{n},{din}], w is [{win},{dout}]")));
        }
        if bv.shape != [dout] {
            return Err(shape_err("linear", format!("bias {:?} for d_out {dout}", bv.shape)));
        }
        let out = matmul_bias(xv.data(), wv.data(), Some(bv.data()), n, din, dout);
        let value = Tensor {
            shape: vec![n, dout],
            data: out,
        };
        Ok(self.push(value, Op::Linear(x, w, b), &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x), &[x])
    }

    /// Softmax of a 1-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.shape.len() != 1 {
            return Err(shape_err("softmax", format!("expected 1-D, got {:?}", xv.shape)));
        }
        let data = softmax_slice(xv.data())?;
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Independent softmax over each row of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let (n, m) = xv
            .dims2()
            .ok_or_else(|| shape_err("softmax_rows", format!("expected 2-D, got {:?}", xv.shape)))?;
        let mut data = Vec::with_capacity(n * m);
        for r in 0..n {
            data.extend(softmax_slice(&xv.data[r * m..(r + 1) * m])?);
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err(op, format!("{:?} vs {:?}", av.shape, bv.shape)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|a| a * k);
        self.push(v, Op::Scale(x, k), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of all entries; the mean of an empty tensor is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = if xv.data.is_empty() {
            0.0
        } else {
            xv.data.iter().sum::<f64>() / xv.data.len() as f64
        };
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Scales row `r` of `x[n,m]` by `c[r]`, where `c` is `[n,1]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var, AutodiffError> {
        let (xv, cv) = (self.value(x), self.value(c));
        let (n, m) = xv
            .dims2()
            .ok_or_else(|| shape_err("mul_col", format!("x must be 2-D, got {:?}", xv.shape)))?;
        if cv.shape != [n, 1] {
            return Err(shape_err("mul_col", format!("column {:?} for {n} rows", cv.shape)));
        }
        let mut data = xv.data.clone();
        for r in 0..n {
            let k = cv.data[r];
            data[r * m..(r + 1) * m].iter_mut().for_each(|v| *v *= k);
        }
        let value = Tensor {
            shape: vec![n, m],
            data,
        };
        Ok(self.push(value, Op::MulCol(x, c), &[x, c]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self
                .value(p)
                .dims2()
                .ok_or_else(|| shape_err("concat_cols", "inputs must be 2-D"))?;
            if *rows.get_or_insert(r) != r {
                return Err(shape_err("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let n = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor {
            shape: vec![n, total],
            data,
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let (n, m) = xv
            .dims2()
            .ok_or_else(|| shape_err("slice_cols", "input must be 2-D"))?;
        if start + len > m {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {m} columns")));
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&xv.data[r * m + start..r * m + start + len]);
        }
        let value = Tensor {
            shape: vec![n, len],
            data,
        };
        Ok(self.push(value, Op::SliceCols(x, start), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Normalizes each consecutive run of `group` entries to unit L2 norm.
    pub fn normalize_groups(&mut self, x: Var, group: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if group == 0 || xv.data.len() % group != 0 {
            return Err(shape_err(
                "normalize_groups",
                format!("{} values not divisible into groups of {group}", xv.data.len()),
            ));
        }
        let mut data = xv.data.clone();
        for chunk in data.chunks_mut(group) {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(AutodiffError::ZeroNorm);
            }
            chunk.iter_mut().for_each(|v| *v /= norm);
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::NormalizeGroups(x, group), &[x]))
    }

    /// Records a custom primitive whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse pass from a scalar root. Nodes are visited in exact reverse
    /// recording order; only nodes that depend on a `requires_grad` leaf
    /// receive gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(rv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(Tensor::full(rv.shape.clone(), 1.0));
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let contributions = self.local_backward(node, &g);
            grads[id] = Some(g);
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = (xv.shape[0], xv.shape[1]);
                let dout = wv.shape[1];
                let mut dx = vec![0.0; n * din];
                let mut dw = vec![0.0; din * dout];
                let mut db = vec![0.0; dout];
                for i in 0..n {
                    let gi = &g.data[i * dout..(i + 1) * dout];
                    let xi = &xv.data[i * din..(i + 1) * din];
                    for (d, gv) in db.iter_mut().zip(gi) {
                        *d += gv;
                    }
                    for k in 0..din {
                        let wk = &wv.data[k * dout..(k + 1) * dout];
                        dx[i * din + k] = wk.iter().zip(gi).map(|(a, b)| a * b).sum();
                        let xik = xi[k];
                        if xik != 0.0 {
                            for (d, gv) in dw[k * dout..(k + 1) * dout].iter_mut().zip(gi) {
                                *d += xik * gv;
                            }
                        }
                    }
                }
                vec![
                    (*x, Tensor { shape: xv.shape.clone(), data: dx }),
                    (*w, Tensor { shape: wv.shape.clone(), data: dw }),
                    (*b, Tensor { shape: vec![dout], data: db }),
                ]
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                vec![(*x, zip_map(g, xv, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))]
            }
            Op::Sigmoid(x) => vec![(*x, zip_map(g, out, |gv, y| gv * y * (1.0 - y)))],
            Op::Tanh(x) => vec![(*x, zip_map(g, out, |gv, y| gv * (1.0 - y * y)))],
            Op::Exp(x) => vec![(*x, zip_map(g, out, |gv, y| gv * y))],
            Op::Abs(x) => {
                let xv = self.value(*x);
                vec![(*x, zip_map(g, xv, |gv, xv| gv * sign(xv)))]
            }
            Op::Softmax(x) => vec![(*x, softmax_backward(g, out, out.data.len()))],
            Op::SoftmaxRows(x) => vec![(*x, softmax_backward(g, out, out.shape[1]))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, zip_map(g, bv, |gv, bv| gv * bv)),
                    (*b, zip_map(g, av, |gv, av| gv * av)),
                ]
            }
            Op::Scale(x, k) => vec![(*x, g.map(|v| v * k))],
            Op::Sum(x) => {
                let xv = self.value(*x);
                vec![(*x, Tensor::full(xv.shape.clone(), g.data[0]))]
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let n = xv.data.len().max(1) as f64;
                vec![(*x, Tensor::full(xv.shape.clone(), g.data[0] / n))]
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (self.value(*x), self.value(*c));
                let (n, m) = (xv.shape[0], xv.shape[1]);
                let mut dx = g.data.clone();
                let mut dc = vec![0.0; n];
                for r in 0..n {
                    let row = r * m..(r + 1) * m;
                    dc[r] = g.data[row.clone()]
                        .iter()
                        .zip(&xv.data[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    dx[row].iter_mut().for_each(|v| *v *= cv.data[r]);
                }
                vec![
                    (*x, Tensor { shape: xv.shape.clone(), data: dx }),
                    (*c, Tensor { shape: vec![n, 1], data: dc }),
                ]
            }
            Op::ConcatCols(parts) => {
                let n = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).shape[1];
                    let mut d = Vec::with_capacity(n * w);
                    for r in 0..n {
                        d.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                    }
                    res.push((p, Tensor { shape: vec![n, w], data: d }));
                    offset += w;
                }
                res
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (n, m) = (xv.shape[0], xv.shape[1]);
                let len = out.shape[1];
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    d[r * m + start..r * m + start + len]
                        .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                vec![(*x, Tensor { shape: xv.shape.clone(), data: d })]
            }
            Op::Reshape(x) => {
                let xv = self.value(*x);
                vec![(*x, Tensor { shape: xv.shape.clone(), data: g.data.clone() })]
            }
            Op::NormalizeGroups(x, group) => {
                let xv = self.value(*x);
                let mut d = vec![0.0; xv.data.len()];
                for (((dc, xc), yc), gc) in d
                    .chunks_mut(*group)
                    .zip(xv.data.chunks(*group))
                    .zip(out.data.chunks(*group))
                    .zip(g.data.chunks(*group))
                {
                    let norm = xc.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yg: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                    for i in 0..*group {
                        dc[i] = (gc[i] - yc[i] * yg) / norm;
                    }
                }
                vec![(*x, Tensor { shape: xv.shape.clone(), data: d })]
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&values, out, g);
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(&v, g)| g.map(|g| (v, g)))
                    .collect()
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: other.shape.clone(),
        data: g.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
    }
}

/// Max-subtracted softmax. Rejects non-finite entries.
pub fn softmax_slice(x: &[f64]) -> Result<Vec<f64>, AutodiffError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AutodiffError::NonFinite { op: "softmax" });
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn softmax_backward(g: &Tensor, y: &Tensor, width: usize) -> Tensor {
    let mut d = vec![0.0; y.data.len()];
    for ((dc, yc), gc) in d
        .chunks_mut(width)
        .zip(y.data.chunks(width))
        .zip(g.data.chunks(width))
    {
        let dot: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
        for i in 0..width {
            dc[i] = yc[i] * (gc[i] - dot);
        }
    }
    Tensor {
        shape: y.shape.clone(),
        data: d,
    }
}

pub(crate) fn matmul_bias(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        let row = &mut out[i * dout..(i + 1) * dout];
        if let Some(b) = b {
            row.copy_from_slice(b);
        }
        for k in 0..din {
            let xik = x[i * din + k];
            if xik == 0.0 {
                continue;
            }
            for (o, wv) in row.iter_mut().zip(&w[k * dout..(k + 1) * dout]) {
                *o += xik * wv;
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

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` with respect to every entry of `inputs[which]`.
    fn fd_grad(
        inputs: &[Tensor],
        which: usize,
        f: &dyn Fn(&[Tensor]) -> f64,
        h: f64,
    ) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            out.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (a, n) in analytic.iter().zip(numeric) {
            let rel = (a - n).abs() / (n.abs() + 1e-8);
            assert!(rel < tol || (a - n).abs() < 1e-9, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn linear_selects_row_and_passes_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::matrix(2, 2, vec![2.0, 3.0, 5.0, 7.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);

        let z = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let b2 = tape.constant(Tensor::vector(vec![4.0, -1.0]));
        let y2 = tape.linear(z, w, b2).unwrap();
        assert_eq!(tape.value(y2).data(), &[4.0, -1.0]);
    }

    #[test]
    fn linear_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let w = tape.constant(Tensor::zeros(vec![2, 2]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(matches!(tape.linear(x, w, b), Err(AutodiffError::Shape { .. })));
        let w3 = tape.constant(Tensor::zeros(vec![3, 2]));
        let b3 = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.linear(x, w3, b3).is_err());
        // nothing recorded for the rejected calls
        assert_eq!(tape.len(), 5);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            random(&mut rng, vec![3, 5]),
            random(&mut rng, vec![5, 2]),
            random(&mut rng, vec![2]),
        ];
        let weights = random(&mut rng, vec![3, 2]);
        let f = |t: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.constant(t[0].clone());
            let w = tape.constant(t[1].clone());
            let b = tape.constant(t[2].clone());
            let y = tape.linear(x, w, b).unwrap();
            tape.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(inputs[0].clone(), true);
        let w = tape.leaf(inputs[1].clone(), true);
        let b = tape.leaf(inputs[2].clone(), true);
        let y = tape.linear(x, w, b).unwrap();
        let c = tape.constant(weights.clone());
        let p = tape.mul(y, c).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        for (i, v) in [x, w, b].into_iter().enumerate() {
            assert_close(grads.get(v).unwrap().data(), &fd_grad(&inputs, i, &f, 1e-5), 1e-4);
        }
    }

    #[test]
    fn relu_forward_and_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        // subgradient at exactly zero is zero
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-3.0, -0.5, -1e-3]), true);
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_check_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = random(&mut rng, vec![4, 4]);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let weights = random(&mut rng, vec![4, 4]);
        let f = |t: &[Tensor]| -> f64 {
            t[0].data()
                .iter()
                .zip(weights.data())
                .map(|(a, w)| a.max(0.0) * w)
                .sum()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let y = tape.relu(xv);
        let c = tape.constant(weights.clone());
        let p = tape.mul(y, c).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_close(g.get(xv).unwrap().data(), &fd_grad(&[x], 0, &f, 1e-5), 1e-4);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![1000.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300 && d[1] >= 0.0);

        let x = tape.constant(Tensor::vector(vec![1.0, f64::NAN]));
        assert_eq!(
            tape.softmax(x).unwrap_err(),
            AutodiffError::NonFinite { op: "softmax" }
        );
        let x = tape.constant(Tensor::vector(vec![f64::INFINITY, 0.0]));
        assert!(tape.softmax(x).is_err());
    }

    #[test]
    fn softmax_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, vec![5]);
        let weights = random(&mut rng, vec![5]);
        let f = |t: &[Tensor]| -> f64 {
            softmax_slice(t[0].data())
                .unwrap()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let y = tape.softmax(xv).unwrap();
        let c = tape.constant(weights.clone());
        let p = tape.mul(y, c).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_close(g.get(xv).unwrap().data(), &fd_grad(&[x], 0, &f, 1e-5), 1e-4);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(
            tape.backward(y).unwrap_err(),
            AutodiffError::NonScalarRoot(vec![2])
        );
    }

    #[test]
    fn backward_of_sum_is_ones_and_of_square_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq);
        let g = tape.backward(s2).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]), true);
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn structural_ops_route_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, vec![3, 2]);
        let b = random(&mut rng, vec![3, 4]);
        let c = random(&mut rng, vec![3, 1]);
        let wts = random(&mut rng, vec![3, 4]);
        let build = |tape: &mut Tape, t: &[Tensor], rg: bool| -> (Vec<Var>, Var) {
            let a = tape.leaf(t[0].clone(), rg);
            let b = tape.leaf(t[1].clone(), rg);
            let c = tape.leaf(t[2].clone(), rg);
            let cat = tape.concat_cols(&[a, b]).unwrap();
            let sl = tape.slice_cols(cat, 1, 4).unwrap();
            let sc = tape.mul_col(sl, c).unwrap();
            let rs = tape.reshape(sc, vec![12]).unwrap();
            let rs = tape.reshape(rs, vec![3, 4]).unwrap();
            let th = tape.tanh(rs);
            let sg = tape.sigmoid(th);
            let ex = tape.exp(sg);
            let ab = tape.abs(ex);
            let nm = tape.normalize_groups(ab, 4).unwrap();
            let sm = tape.softmax_rows(nm).unwrap();
            let w = tape.constant(wts.clone());
            let p = tape.mul(sm, w).unwrap();
            let d = tape.sub(p, sm).unwrap();
            let e = tape.add(d, p).unwrap();
            let sc2 = tape.scale(e, 1.7);
            let m = tape.mean(sc2);
            (vec![a, b, c], m)
        };
        let inputs = vec![a, b, c];
        let f = |t: &[Tensor]| {
            let mut tape = Tape::new();
            let (_, m) = build(&mut tape, t, false);
            tape.value(m).data()[0]
        };
        let mut tape = Tape::new();
        let (vars, m) = build(&mut tape, &inputs, true);
        let g = tape.backward(m).unwrap();
        for (i, v) in vars.into_iter().enumerate() {
            assert_close(g.get(v).unwrap().data(), &fd_grad(&inputs, i, &f, 1e-5), 1e-4);
        }
    }

    #[test]
    fn gradient_of_sum_of_losses_is_sum_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, vec![2, 3]);
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let t = tape.tanh(xv);
            let l1 = tape.sum(t);
            let e = tape.exp(xv);
            let l2 = tape.mean(e);
            let root = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(root).unwrap().get(xv).unwrap().clone()
        };
        let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..6 {
            assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, vec![4, 3]);
        let w = random(&mut rng, vec![3, 3]);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let b = tape.constant(Tensor::zeros(vec![3]));
            let y = tape.linear(xv, wv, b).unwrap();
            let y = tape.softmax_rows(y).unwrap();
            let l = tape.sum(y);
            let g = tape.backward(l).unwrap();
            (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
    }

    #[test]
    fn normalize_rejects_zero_group() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 1.0, 0.0]));
        assert_eq!(tape.normalize_groups(x, 2).unwrap_err(), AutodiffError::ZeroNorm);
    }
}
