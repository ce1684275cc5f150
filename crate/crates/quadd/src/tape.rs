//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one backward rule per operation, in execution order.
//! [`Tape::backward`] seeds a scalar loss with gradient one and replays the
//! rules in reverse; gradients accumulate additively across fan-out. Tapes
//! are rebuilt every iteration and confined to a single worker.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

type BackwardRule = Box<dyn Fn() -> Result<()>>;

pub struct Tape<S: Scalar = f64> {
    nodes: RefCell<Vec<BackwardRule>>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn matmul_vals<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != S::zero() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    out
}

pub(crate) fn transpose_vals<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn rowwise_softmax<S: Scalar>(logits: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); logits.len()];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
            *o = (v - max).exp();
            sum = sum + *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o = *o / sum;
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded operations.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    fn record(&self, rule: BackwardRule) {
        self.nodes.borrow_mut().push(rule);
    }

    fn any_grad(inputs: &[&Tensor<S>]) -> bool {
        inputs.iter().any(|t| t.requires_grad())
    }

    /// Propagates gradients from a scalar loss to every tensor that
    /// requires them. Gradients add across fan-out; leaves keep whatever
    /// gradient they already hold, so callers zero leaves between passes.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        loss.set_grad(vec![S::one()]);
        for rule in self.nodes.borrow().iter().rev() {
            rule()?;
        }
        Ok(())
    }

    fn unary_with_factor(&self, x: &Tensor<S>, out_data: Vec<S>, factor: Vec<S>) -> Tensor<S> {
        let out = Tensor::from_parts(x.shape(), out_data, x.requires_grad());
        if x.requires_grad() {
            let x_h = x.clone();
            let out_h = out.clone();
            self.record(Box::new(move || {
                let contribution = out_h.with_grad(|g| {
                    g.iter().zip(factor.iter()).map(|(&g, &f)| g * f).collect::<Vec<S>>()
                });
                if let Some(c) = contribution {
                    x_h.add_grad(&c);
                }
                Ok(())
            }));
        }
        out
    }

    /// Rectified linear unit; the derivative at zero is zero.
    pub fn relu(&self, x: &Tensor<S>) -> Tensor<S> {
        let vals = x.value();
        let out: Vec<S> = vals.iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let factor: Vec<S> = vals
            .iter()
            .map(|&v| if v > S::zero() { S::one() } else { S::zero() })
            .collect();
        self.unary_with_factor(x, out, factor)
    }

    pub fn tanh(&self, x: &Tensor<S>) -> Tensor<S> {
        let out: Vec<S> = x.value().iter().map(|&v| v.tanh()).collect();
        let factor: Vec<S> = out.iter().map(|&y| S::one() - y * y).collect();
        self.unary_with_factor(x, out, factor)
    }

    pub fn sqrt(&self, x: &Tensor<S>) -> Tensor<S> {
        let out: Vec<S> = x.value().iter().map(|&v| v.sqrt()).collect();
        let half = S::cast_f64(0.5);
        let factor: Vec<S> = out.iter().map(|&y| half / y).collect();
        self.unary_with_factor(x, out, factor)
    }

    pub fn recip(&self, x: &Tensor<S>) -> Tensor<S> {
        let out: Vec<S> = x.value().iter().map(|&v| v.recip()).collect();
        let factor: Vec<S> = out.iter().map(|&y| -(y * y)).collect();
        self.unary_with_factor(x, out, factor)
    }

    /// Elementwise `mul * x + add` with scalar constants.
    pub fn affine(&self, x: &Tensor<S>, mul: S, add: S) -> Tensor<S> {
        let out: Vec<S> = x.value().iter().map(|&v| mul * v + add).collect();
        let factor = vec![mul; out.len()];
        self.unary_with_factor(x, out, factor)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out_data = a.with_data(|av| b.with_data(|bv| matmul_vals(av, bv, m, k, n)));
        let out = Tensor::from_parts(vec![m, n], out_data, Self::any_grad(&[a, b]));
        if out.requires_grad() {
            let (a_h, b_h, out_h) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out_h.with_grad(|g| g.to_vec()) {
                    Some(g) => g,
                    None => return Ok(()),
                };
                if a_h.requires_grad() {
                    let da = b_h.with_data(|bv| {
                        let bt = transpose_vals(bv, k, n);
                        matmul_vals(&g, &bt, m, n, k)
                    });
                    a_h.add_grad(&da);
                }
                if b_h.requires_grad() {
                    let db = a_h.with_data(|av| {
                        let at = transpose_vals(av, m, k);
                        matmul_vals(&at, &g, k, m, n)
                    });
                    b_h.add_grad(&db);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    /// Elementwise sum. `b` may also have a shape equal to a trailing
    /// suffix of `a`'s shape, in which case it broadcasts over the leading
    /// axes (bias addition).
    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        let same = sa == sb;
        let suffix = !same && sa.len() > sb.len() && sa[sa.len() - sb.len()..] == sb[..];
        if !same && !suffix {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let chunk = numel(&sb).max(1);
        let out_data = a.with_data(|av| {
            b.with_data(|bv| {
                let mut out = av.to_vec();
                for block in out.chunks_mut(chunk) {
                    for (o, &v) in block.iter_mut().zip(bv.iter()) {
                        *o = *o + v;
                    }
                }
                out
            })
        });
        let out = Tensor::from_parts(sa, out_data, Self::any_grad(&[a, b]));
        if out.requires_grad() {
            let (a_h, b_h, out_h) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out_h.with_grad(|g| g.to_vec()) {
                    Some(g) => g,
                    None => return Ok(()),
                };
                if a_h.requires_grad() {
                    a_h.add_grad(&g);
                }
                if b_h.requires_grad() {
                    let mut db = vec![S::zero(); chunk];
                    for block in g.chunks(chunk) {
                        for (d, &v) in db.iter_mut().zip(block.iter()) {
                            *d = *d + v;
                        }
                    }
                    b_h.add_grad(&db);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: sa,
                rhs: sb,
            });
        }
        let out_data =
            a.with_data(|av| b.with_data(|bv| av.iter().zip(bv).map(|(&x, &y)| x - y).collect()));
        let out = Tensor::from_parts(sa, out_data, Self::any_grad(&[a, b]));
        if out.requires_grad() {
            let (a_h, b_h, out_h) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out_h.with_grad(|g| g.to_vec()) {
                    Some(g) => g,
                    None => return Ok(()),
                };
                if a_h.requires_grad() {
                    a_h.add_grad(&g);
                }
                if b_h.requires_grad() {
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    b_h.add_grad(&neg);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out_data =
            a.with_data(|av| b.with_data(|bv| av.iter().zip(bv).map(|(&x, &y)| x * y).collect()));
        let out = Tensor::from_parts(sa, out_data, Self::any_grad(&[a, b]));
        if out.requires_grad() {
            let (a_h, b_h, out_h) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out_h.with_grad(|g| g.to_vec()) {
                    Some(g) => g,
                    None => return Ok(()),
                };
                if a_h.requires_grad() {
                    let da =
                        b_h.with_data(|bv| g.iter().zip(bv).map(|(&g, &y)| g * y).collect::<Vec<S>>());
                    a_h.add_grad(&da);
                }
                if b_h.requires_grad() {
                    let db =
                        a_h.with_data(|av| g.iter().zip(av).map(|(&g, &x)| g * x).collect::<Vec<S>>());
                    b_h.add_grad(&db);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let out_data = x.with_data(|v| transpose_vals(v, rows, cols));
        let out = Tensor::from_parts(vec![cols, rows], out_data, x.requires_grad());
        if out.requires_grad() {
            let (x_h, out_h) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(gt) = out_h.with_grad(|g| transpose_vals(g, cols, rows)) {
                    x_h.add_grad(&gt);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    /// Repeats a vector as the rows of a matrix (explicit broadcast).
    pub fn tile_rows(&self, x: &Tensor<S>, rows: usize) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "tile-rows",
                lhs: shape,
                rhs: vec![rows],
            });
        }
        let d = shape[0];
        let out_data = x.with_data(|v| {
            let mut out = Vec::with_capacity(rows * d);
            for _ in 0..rows {
                out.extend_from_slice(v);
            }
            out
        });
        let out = Tensor::from_parts(vec![rows, d], out_data, x.requires_grad());
        if out.requires_grad() {
            let (x_h, out_h) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                let dg = out_h.with_grad(|g| {
                    let mut dg = vec![S::zero(); d];
                    for block in g.chunks(d) {
                        for (o, &v) in dg.iter_mut().zip(block.iter()) {
                            *o = *o + v;
                        }
                    }
                    dg
                });
                if let Some(dg) = dg {
                    x_h.add_grad(&dg);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    /// Selects rows of a rank-2 tensor; backward scatter-adds.
    pub fn gather_rows(&self, x: &Tensor<S>, indices: &[usize]) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather-rows",
                lhs: shape,
                rhs: vec![indices.len()],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                levels: rows,
            });
        }
        let idx = indices.to_vec();
        let out_data = x.with_data(|v| {
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in &idx {
                out.extend_from_slice(&v[i * cols..(i + 1) * cols]);
            }
            out
        });
        let out = Tensor::from_parts(vec![idx.len(), cols], out_data, x.requires_grad());
        if out.requires_grad() {
            let (x_h, out_h) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                let dx = out_h.with_grad(|g| {
                    let mut dx = vec![S::zero(); rows * cols];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dx[i * cols + c] = dx[i * cols + c] + g[r * cols + c];
                        }
                    }
                    dx
                });
                if let Some(dx) = dx {
                    x_h.add_grad(&dx);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    fn reduce_axis(&self, x: &Tensor<S>, axis: usize, mean: bool) -> Result<Tensor<S>> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: if mean { "mean-axis" } else { "sum-axis" },
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let axis_len = shape[axis];
        if axis_len == 0 {
            return Err(Error::EmptyTensor);
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let scale = if mean {
            S::one() / S::cast_usize(axis_len)
        } else {
            S::one()
        };
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out_data = x.with_data(|v| {
            let mut out = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..axis_len {
                    let base = (o * axis_len + k) * inner;
                    for i in 0..inner {
                        out[o * inner + i] = out[o * inner + i] + v[base + i];
                    }
                }
            }
            for v in &mut out {
                *v = *v * scale;
            }
            out
        });
        let out = Tensor::from_parts(out_shape, out_data, x.requires_grad());
        if out.requires_grad() {
            let (x_h, out_h) = (x.clone(), out.clone());
            let n = x.numel();
            self.record(Box::new(move || {
                let dx = out_h.with_grad(|g| {
                    let mut dx = vec![S::zero(); n];
                    for o in 0..outer {
                        for k in 0..axis_len {
                            let base = (o * axis_len + k) * inner;
                            for i in 0..inner {
                                dx[base + i] = dx[base + i] + g[o * inner + i] * scale;
                            }
                        }
                    }
                    dx
                });
                if let Some(dx) = dx {
                    x_h.add_grad(&dx);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(x, axis, false)
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&self, x: &Tensor<S>) -> Tensor<S> {
        let total = x.with_data(|v| v.iter().fold(S::zero(), |acc, &e| acc + e));
        let out = Tensor::from_parts(vec![], vec![total], x.requires_grad());
        if out.requires_grad() {
            let (x_h, out_h) = (x.clone(), out.clone());
            let n = x.numel();
            self.record(Box::new(move || {
                if let Some(g) = out_h.with_grad(|g| g[0]) {
                    x_h.add_grad(&vec![g; n]);
                }
                Ok(())
            }));
        }
        out
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let out_data = x.with_data(|v| rowwise_softmax(v, rows, cols));
        let out = Tensor::from_parts(shape, out_data, x.requires_grad());
        if out.requires_grad() {
            let (x_h, out_h) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                let y = out_h.value();
                let dx = out_h.with_grad(|g| {
                    let mut dx = vec![S::zero(); y.len()];
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let dot = g[span.clone()]
                            .iter()
                            .zip(&y[span.clone()])
                            .fold(S::zero(), |acc, (&gi, &yi)| acc + gi * yi);
                        for c in 0..cols {
                            let i = r * cols + c;
                            dx[i] = y[i] * (g[i] - dot);
                        }
                    }
                    dx
                });
                if let Some(dx) = dx {
                    x_h.add_grad(&dx);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    /// Mean cross-entropy between row logits and integer labels.
    pub fn softmax_cross_entropy(&self, logits: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
        let shape = logits.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax-cross-entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: cols,
            });
        }
        if rows == 0 {
            return Err(Error::EmptyTensor);
        }
        let probs = logits.with_data(|v| rowwise_softmax(v, rows, cols));
        let inv_n = S::one() / S::cast_usize(rows);
        let loss = logits.with_data(|v| {
            let mut total = S::zero();
            for (r, &y) in labels.iter().enumerate() {
                let row = &v[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                let lse = max
                    + row
                        .iter()
                        .fold(S::zero(), |acc, &l| acc + (l - max).exp())
                        .ln();
                total = total + (lse - row[y]);
            }
            total * inv_n
        });
        let out = Tensor::from_parts(vec![], vec![loss], logits.requires_grad());
        if out.requires_grad() {
            let (x_h, out_h) = (logits.clone(), out.clone());
            let labels = labels.to_vec();
            self.record(Box::new(move || {
                if let Some(g) = out_h.with_grad(|g| g[0]) {
                    let mut dx = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        dx[r * cols + y] = dx[r * cols + y] - S::one();
                    }
                    for v in &mut dx {
                        *v = *v * inv_n * g;
                    }
                    x_h.add_grad(&dx);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    /// Sum of squared differences, reduced to a scalar.
    pub fn sq_err(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "squared-error",
                lhs: sa,
                rhs: sb,
            });
        }
        let total = a.with_data(|av| {
            b.with_data(|bv| {
                av.iter()
                    .zip(bv)
                    .fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
            })
        });
        let out = Tensor::from_parts(vec![], vec![total], Self::any_grad(&[a, b]));
        if out.requires_grad() {
            let (a_h, b_h, out_h) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out_h.with_grad(|g| g[0]) {
                    Some(g) => g,
                    None => return Ok(()),
                };
                let two = S::cast_f64(2.0);
                let diff: Vec<S> = a_h.with_data(|av| {
                    b_h.with_data(|bv| {
                        av.iter().zip(bv).map(|(&x, &y)| two * (x - y) * g).collect()
                    })
                });
                if a_h.requires_grad() {
                    a_h.add_grad(&diff);
                }
                if b_h.requires_grad() {
                    let neg: Vec<S> = diff.iter().map(|&v| -v).collect();
                    b_h.add_grad(&neg);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    /// Cosine similarity of two flat vectors, as a scalar.
    pub fn cosine(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.numel() != b.numel() || a.numel() == 0 {
            return Err(Error::ShapeMismatch {
                op: "cosine",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (dot, na2, nb2) = a.with_data(|av| {
            b.with_data(|bv| {
                let mut dot = S::zero();
                let mut na2 = S::zero();
                let mut nb2 = S::zero();
                for (&x, &y) in av.iter().zip(bv) {
                    dot = dot + x * y;
                    na2 = na2 + x * x;
                    nb2 = nb2 + y * y;
                }
                (dot, na2, nb2)
            })
        });
        if na2 == S::zero() || nb2 == S::zero() {
            return Err(Error::ZeroNorm);
        }
        let (na, nb) = (na2.sqrt(), nb2.sqrt());
        let cos = dot / (na * nb);
        let out = Tensor::from_parts(vec![], vec![cos], Self::any_grad(&[a, b]));
        if out.requires_grad() {
            let (a_h, b_h, out_h) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match out_h.with_grad(|g| g[0]) {
                    Some(g) => g,
                    None => return Ok(()),
                };
                if a_h.requires_grad() {
                    let da: Vec<S> = a_h.with_data(|av| {
                        b_h.with_data(|bv| {
                            av.iter()
                                .zip(bv)
                                .map(|(&x, &y)| g * (y / (na * nb) - cos * x / na2))
                                .collect()
                        })
                    });
                    a_h.add_grad(&da);
                }
                if b_h.requires_grad() {
                    let db: Vec<S> = a_h.with_data(|av| {
                        b_h.with_data(|bv| {
                            av.iter()
                                .zip(bv)
                                .map(|(&x, &y)| g * (x / (na * nb) - cos * y / nb2))
                                .collect()
                        })
                    });
                    b_h.add_grad(&db);
                }
                Ok(())
            }));
        }
        Ok(out)
    }

    /// Records an operation whose forward values and backward rule are both
    /// supplied by the caller; the backward rule bypasses autodiff of the
    /// forward computation entirely.
    ///
    /// `backward` receives the output gradient and the inputs and returns
    /// one optional gradient per input (`None` for inputs that receive no
    /// gradient). Wrong-length gradients surface as errors from
    /// [`Tape::backward`].
    pub fn custom_grad<Fw, Bw>(
        &self,
        inputs: &[Tensor<S>],
        forward: Fw,
        backward: Bw,
    ) -> Result<Tensor<S>>
    where
        Fw: FnOnce(&[Tensor<S>]) -> Result<(Vec<usize>, Vec<S>)>,
        Bw: Fn(&[S], &[Tensor<S>]) -> Result<Vec<Option<Vec<S>>>> + 'static,
    {
        let (shape, data) = forward(inputs)?;
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "custom-grad",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let requires = inputs.iter().any(|t| t.requires_grad());
        let out = Tensor::from_parts(shape, data, requires);
        if requires {
            let inputs: Vec<Tensor<S>> = inputs.to_vec();
            let out_h = out.clone();
            self.record(Box::new(move || {
                let g = match out_h.with_grad(|g| g.to_vec()) {
                    Some(g) => g,
                    None => return Ok(()),
                };
                let grads = backward(&g, &inputs)?;
                if grads.len() != inputs.len() {
                    return Err(Error::CustomGradShape {
                        index: grads.len(),
                        got: grads.len(),
                        expected: inputs.len(),
                    });
                }
                for (i, (input, grad)) in inputs.iter().zip(grads).enumerate() {
                    if let Some(grad) = grad {
                        if grad.len() != input.numel() {
                            return Err(Error::CustomGradShape {
                                index: i,
                                got: grad.len(),
                                expected: input.numel(),
                            });
                        }
                        if input.requires_grad() {
                            input.add_grad(&grad);
                        }
                    }
                }
                Ok(())
            }));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_component_error};

    #[test]
    fn tanh_is_odd_at_origin() {
        let tape: Tape = Tape::new();
        let x = Tensor::from_vec(vec![0.0]);
        assert_eq!(tape.tanh(&x).value(), vec![0.0]);
    }

    #[test]
    fn matmul_of_ones_gives_row_sums() {
        let tape: Tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        let b = Tensor::matrix(3, 1, vec![1.0; 3]).unwrap();
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), vec![2, 1]);
        assert_eq!(y.value(), vec![3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let tape: Tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        let msg = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn uniform_softmax_cross_entropy_is_ln3() {
        let tape: Tape = Tape::new();
        let logits = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let loss = tape.softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((loss.item() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape: Tape = Tape::new();
        let x = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = tape.sum(&x);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_tanh_matches_analytic() {
        let tape: Tape = Tape::new();
        let x = Tensor::param(vec![1], vec![0.5]).unwrap();
        let loss = tape.sum(&tape.tanh(&x));
        tape.backward(&loss).unwrap();
        let expected = 1.0 - 0.5f64.tanh().powi(2);
        assert!((x.grad().unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape: Tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = tape.tanh(&x);
        assert!(matches!(
            tape.backward(&y),
            Err(crate::error::Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // y = x + x: each path contributes 1.
        let tape: Tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, -2.0]).unwrap();
        let y = tape.add(&x, &x).unwrap();
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn broadcast_add_sums_bias_gradient_over_rows() {
        let tape: Tape = Tape::new();
        let a = Tensor::param(vec![3, 2], vec![0.0; 6]).unwrap();
        let b = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = tape.add(&a, &b).unwrap();
        assert_eq!(y.value(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn custom_grad_identity_is_passthrough() {
        let tape: Tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.5, -0.5]).unwrap();
        let y = tape
            .custom_grad(
                &[x.clone()],
                |ins| Ok((ins[0].shape(), ins[0].value())),
                |g, _| Ok(vec![Some(g.to_vec())]),
            )
            .unwrap();
        assert_eq!(y.value(), vec![1.5, -0.5]);
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn custom_grad_hard_round_with_unit_backward() {
        let tape: Tape = Tape::new();
        let x = Tensor::param(vec![1], vec![0.4]).unwrap();
        let y = tape
            .custom_grad(
                &[x.clone()],
                |ins| {
                    Ok((
                        ins[0].shape(),
                        ins[0].value().iter().map(|v| v.round()).collect(),
                    ))
                },
                |g, _| Ok(vec![Some(g.to_vec())]),
            )
            .unwrap();
        assert_eq!(y.value(), vec![0.0]);
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn custom_grad_clip_with_indicator_backward() {
        let tape: Tape = Tape::new();
        let x = Tensor::param(vec![1], vec![2.0]).unwrap();
        let y = tape
            .custom_grad(
                &[x.clone()],
                |ins| {
                    Ok((
                        ins[0].shape(),
                        ins[0].value().iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
                    ))
                },
                |g, ins| {
                    let x = ins[0].value();
                    Ok(vec![Some(
                        g.iter()
                            .zip(&x)
                            .map(|(&g, &x)| if x.abs() <= 1.0 { g } else { 0.0 })
                            .collect(),
                    )])
                },
            )
            .unwrap();
        assert_eq!(y.value(), vec![1.0]);
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn custom_grad_wrong_shape_is_an_error() {
        let tape: Tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = tape
            .custom_grad(
                &[x.clone()],
                |ins| Ok((ins[0].shape(), ins[0].value())),
                |_, _| Ok(vec![Some(vec![1.0])]),
            )
            .unwrap();
        let loss = tape.sum(&y);
        assert!(matches!(
            tape.backward(&loss),
            Err(crate::error::Error::CustomGradShape { .. })
        ));
    }

    /// Central finite differences against every differentiable op on
    /// randomized inputs in [-2, 2].
    #[test]
    fn finite_differences_validate_every_op() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
        };

        type Case = (&'static str, usize, Box<dyn Fn(&Tape, &Tensor) -> Tensor>);
        let sum_of = |f: &dyn Fn(&Tape, &Tensor) -> Tensor, tape: &Tape, x: &Tensor| -> Tensor {
            tape.sum(&f(tape, x))
        };

        let cases: Vec<Case> = vec![
            ("tanh", 5, Box::new(|t, x| t.tanh(x))),
            ("relu", 5, Box::new(|t, x| t.relu(x))),
            (
                "sqrt",
                4,
                Box::new(|t, x| {
                    // keep inputs positive
                    let shifted = t.affine(x, 0.25, 3.0);
                    t.sqrt(&shifted)
                }),
            ),
            (
                "recip",
                4,
                Box::new(|t, x| {
                    let shifted = t.affine(x, 0.25, 3.0);
                    t.recip(&shifted)
                }),
            ),
            ("affine", 5, Box::new(|t, x| t.affine(x, 1.7, -0.3))),
        ];
        // Elementwise/unary cases: x itself is the leaf.
        for (name, n, f) in &cases {
            let x0 = draw(*n);
            let eval = |vals: &[f64]| -> f64 {
                let tape: Tape = Tape::new();
                let x = Tensor::param(vec![vals.len()], vals.to_vec()).unwrap();
                sum_of(f.as_ref(), &tape, &x).item()
            };
            let fd = central_diff(&eval, &x0, 1e-4);
            let tape: Tape = Tape::new();
            let x = Tensor::param(vec![x0.len()], x0.clone()).unwrap();
            let loss = sum_of(f.as_ref(), &tape, &x);
            tape.backward(&loss).unwrap();
            let err = max_component_error(&x.grad().unwrap(), &fd);
            assert!(err < 1e-4, "{name}: max relative error {err}");
        }

        // Structured ops: express the loss as a closure over flat values.
        let structured: Vec<(&str, usize, Box<dyn Fn(&[f64]) -> (Tape, Tensor, Tensor)>)> = vec![
            (
                "matmul",
                6,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![3, 2], vals.to_vec()).unwrap();
                    let w = Tensor::matrix(2, 2, vec![0.3, -0.8, 1.1, 0.4]).unwrap();
                    let loss = tape.sum(&tape.matmul(&x, &w).unwrap());
                    (tape, x, loss)
                }),
            ),
            (
                "mul",
                6,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![6], vals.to_vec()).unwrap();
                    let c = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.1, 0.9, -0.4]);
                    let loss = tape.sum(&tape.mul(&x, &c).unwrap());
                    (tape, x, loss)
                }),
            ),
            (
                "mul-both-sides",
                4,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![4], vals.to_vec()).unwrap();
                    let loss = tape.sum(&tape.mul(&x, &x).unwrap());
                    (tape, x, loss)
                }),
            ),
            (
                "sub",
                4,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![4], vals.to_vec()).unwrap();
                    let c = Tensor::from_vec(vec![0.2, 0.4, -0.6, 0.8]);
                    let d = tape.sub(&x, &c).unwrap();
                    let loss = tape.sq_err(&d, &Tensor::from_vec(vec![0.0; 4])).unwrap();
                    (tape, x, loss)
                }),
            ),
            (
                "transpose",
                6,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![2, 3], vals.to_vec()).unwrap();
                    let xt = tape.transpose(&x).unwrap();
                    let w = Tensor::matrix(2, 1, vec![0.7, -0.2]).unwrap();
                    let loss = tape.sum(&tape.matmul(&xt, &w).unwrap());
                    (tape, x, loss)
                }),
            ),
            (
                "tile-rows",
                3,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![3], vals.to_vec()).unwrap();
                    let tiled = tape.tile_rows(&x, 4).unwrap();
                    let sq = tape.mul(&tiled, &tiled).unwrap();
                    let loss = tape.sum(&sq);
                    (tape, x, loss)
                }),
            ),
            (
                "gather-rows",
                6,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![3, 2], vals.to_vec()).unwrap();
                    let picked = tape.gather_rows(&x, &[2, 0, 2]).unwrap();
                    let sq = tape.mul(&picked, &picked).unwrap();
                    let loss = tape.sum(&sq);
                    (tape, x, loss)
                }),
            ),
            (
                "sum-axis",
                6,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![2, 3], vals.to_vec()).unwrap();
                    let s = tape.sum_axis(&x, 1).unwrap();
                    let sq = tape.mul(&s, &s).unwrap();
                    let loss = tape.sum(&sq);
                    (tape, x, loss)
                }),
            ),
            (
                "mean-axis",
                6,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![2, 3], vals.to_vec()).unwrap();
                    let m = tape.mean_axis(&x, 0).unwrap();
                    let sq = tape.mul(&m, &m).unwrap();
                    let loss = tape.sum(&sq);
                    (tape, x, loss)
                }),
            ),
            (
                "softmax",
                6,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![2, 3], vals.to_vec()).unwrap();
                    let p = tape.softmax(&x).unwrap();
                    let w = Tensor::matrix(2, 3, vec![0.9, -0.3, 0.5, 1.2, 0.0, -0.7]).unwrap();
                    let weighted = tape.mul(&p, &w).unwrap();
                    let loss = tape.sum(&weighted);
                    (tape, x, loss)
                }),
            ),
            (
                "softmax-cross-entropy",
                6,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![2, 3], vals.to_vec()).unwrap();
                    let loss = tape.softmax_cross_entropy(&x, &[2, 0]).unwrap();
                    (tape, x, loss)
                }),
            ),
            (
                "squared-error",
                5,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![5], vals.to_vec()).unwrap();
                    let target = Tensor::from_vec(vec![0.3, -0.6, 0.1, 1.4, -1.2]);
                    let loss = tape.sq_err(&x, &target).unwrap();
                    (tape, x, loss)
                }),
            ),
            (
                "cosine",
                5,
                Box::new(|vals: &[f64]| {
                    let tape: Tape = Tape::new();
                    let x = Tensor::param(vec![5], vals.to_vec()).unwrap();
                    let other = Tensor::from_vec(vec![0.8, -0.1, 0.6, -1.3, 0.2]);
                    let loss = tape.cosine(&x, &other).unwrap();
                    (tape, x, loss)
                }),
            ),
        ];
        for (name, n, build) in &structured {
            let x0 = draw(*n);
            let eval = |vals: &[f64]| -> f64 {
                let (_tape, _x, loss) = build(vals);
                loss.item()
            };
            let fd = central_diff(&eval, &x0, 1e-4);
            let (tape, x, loss) = build(&x0);
            tape.backward(&loss).unwrap();
            let err = max_component_error(&x.grad().unwrap(), &fd);
            assert!(err < 1e-4, "{name}: max relative error {err}");
        }
    }

    /// Two-layer network gradient against central finite differences.
    #[test]
    fn two_layer_network_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w1v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xv: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();

        let build = |w1v: &[f64]| -> (Tape, Tensor, Tensor) {
            let tape: Tape = Tape::new();
            let x = Tensor::matrix(2, 4, xv.clone()).unwrap();
            let w1 = Tensor::param(vec![4, 3], w1v.to_vec()).unwrap();
            let w2 = Tensor::matrix(3, 4, w2v.clone()).unwrap();
            let h = tape.tanh(&tape.matmul(&x, &w1).unwrap());
            let logits = tape.matmul(&h, &w2).unwrap();
            let loss = tape.softmax_cross_entropy(&logits, &[1, 3]).unwrap();
            (tape, w1, loss)
        };
        let fd = central_diff(&|v: &[f64]| build(v).2.item(), &w1v, 1e-4);
        let (tape, w1, loss) = build(&w1v);
        tape.backward(&loss).unwrap();
        let err = max_component_error(&w1.grad().unwrap(), &fd);
        assert!(err < 1e-4, "max relative error {err}");
    }

    /// Rebuilding the tape and rerunning backward reproduces gradients
    /// bit for bit.
    #[test]
    fn repeat_backward_after_reset_is_deterministic() {
        let run = || -> Vec<f64> {
            let tape: Tape = Tape::new();
            let x = Tensor::param(vec![4], vec![0.3, -1.2, 0.8, 2.4]).unwrap();
            let h = tape.tanh(&x);
            let y = tape.mul(&h, &h).unwrap();
            let loss = tape.sum(&y);
            tape.backward(&loss).unwrap();
            x.grad().unwrap()
        };
        let first = run();
        let second = run();
        assert_eq!(first, second);
    }

    #[test]
    fn tape_clear_empties_nodes() {
        let tape: Tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let _ = tape.tanh(&x);
        assert_eq!(tape.len(), 1);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn constant_graphs_record_nothing() {
        let tape: Tape = Tape::new();
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let _ = tape.tanh(&x);
        assert!(tape.is_empty());
    }
}
