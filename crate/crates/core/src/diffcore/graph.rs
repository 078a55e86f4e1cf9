//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape order is already a
//! topological order and the backward sweep is a single reverse scan.

use std::rc::Rc;

use super::spatial::{self, Padding, Rect};
use super::tensor::Tensor;
use crate::error::{numerical_err, shape_err, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise unary operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Square,
    /// Huber-style smooth L1 with threshold 1.
    SmoothL1,
}

/// The element-wise operator set exposed through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    MeanPoolSpatial,
    L2Norm,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Unary(Var, Unary),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy { scalar: Var, x: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Sum(Var),
    MeanPoolSpatial(Var),
    L2Norm(Var),
    AddBias(Var, Var),
    Conv2d { input: Var, kernel: Var, padding: Padding },
    Blur { input: Var, taps: Rc<[f64]>, padding: Padding },
    RoiMean { input: Var, rects: Rc<[Rect]> },
    RowNormalize(Var),
    LogSumExpRows { x: Var, exclude_diag: bool },
    Gather { x: Var, cols: Rc<[usize]> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of one forward evaluation.
///
/// Values are immutable once recorded; the graph is meant to live for one
/// forward/backward pass on a single thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to the leaves of a [`Graph`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to the leaf `v`; exactly zero if `v` did not
    /// influence the output. Interior nodes always report zero.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn finite_or(value: Tensor, what: &str) -> Result<Tensor> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(numerical_err!("{what} produced a non-finite value"))
    }
}

fn expect_rank2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [m, n] => Ok((m, n)),
        _ => Err(shape_err!("{what} expects a rank-2 tensor, got {:?}", t.shape())),
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
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = finite_or(self.binary(a, b, |x, y| x / y)?, "div")?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn unary(&mut self, x: Var, op: Unary) -> Result<Var> {
        let f: fn(f64) -> f64 = match op {
            Unary::Neg => |x| -x,
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::SmoothL1 => |x| {
                let a = x.abs();
                if a < 1.0 {
                    0.5 * x * x
                } else {
                    a - 0.5
                }
            },
        };
        let v = self.value(x).map(f);
        if !v.is_finite() {
            return Err(numerical_err!("{op:?} produced a non-finite value"));
        }
        Ok(self.push(v, Op::Unary(x, op)))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    /// Dispatches the public element-wise operator set.
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(shape_err!("{op:?} takes {arity} argument(s), got {}", args.len()));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Relu => self.relu(args[0]),
            Elementwise::Tanh => self.tanh(args[0]),
            Elementwise::Sigmoid => self.sigmoid(args[0]),
            Elementwise::Exp => self.exp(args[0]),
            Elementwise::Neg => self.neg(args[0]),
        }
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = finite_or(self.value(x).map(|a| a * c), "scale")?;
        Ok(self.push(v, Op::Scale(x, c)))
    }

    /// Adds a constant.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = finite_or(self.value(x).map(|a| a + c), "offset")?;
        Ok(self.push(v, Op::Offset(x)))
    }

    /// Multiplies every element of `x` by the single-element tensor `scalar`.
    pub fn scale_by(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).len() != 1 {
            return Err(shape_err!("scale_by needs a scalar, got {:?}", self.shape(scalar)));
        }
        let s = self.value(scalar).item();
        let v = self.value(x).map(|a| a * s);
        Ok(self.push(v, Op::ScaleBy { scalar, x }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = expect_rank2(self.value(a), "matmul")?;
        let (k2, n) = expect_rank2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions differ: {m}x{k} * {k2}x{n}"));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = expect_rank2(self.value(x), "transpose")?;
        let data = transpose_raw(self.value(x).data(), m, n);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Flattens and concatenates the inputs into one rank-1 tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat of nothing"));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    pub fn reduce(&mut self, op: Reduce, x: Var) -> Result<Var> {
        match op {
            Reduce::MeanPoolSpatial => self.mean_pool_spatial(x),
            Reduce::L2Norm => self.l2_norm(x),
            Reduce::Sum => self.sum(x),
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `h x w x c` map to its length-`c` vector of channel means.
    pub fn mean_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let means = self.value(x).channel_means()?;
        Ok(self.push(Tensor::vector(means), Op::MeanPoolSpatial(x)))
    }

    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).l2_norm();
        Ok(self.push(Tensor::scalar(n), Op::L2Norm(x)))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let b = self.value(bias);
        let last = *xs.shape().last().unwrap_or(&1);
        if b.rank() != 1 || b.len() != last || xs.rank() == 0 {
            return Err(shape_err!(
                "bias {:?} does not match last axis of {:?}",
                b.shape(),
                xs.shape()
            ));
        }
        let mut data = xs.data().to_vec();
        for chunk in data.chunks_exact_mut(last) {
            for (v, &bv) in chunk.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let v = Tensor::from_parts(xs.shape().to_vec(), data);
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    /// "Same" 2-D convolution of an `h x w x c_in` map with a
    /// `k x k x c_in x c_out` kernel (cross-correlation orientation).
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (h, w, cin) = self.value(input).hwc()?;
        let (k, cout) = match self.value(kernel).shape()[..] {
            [k1, k2, ci, co] if k1 == k2 && k1 % 2 == 1 && ci == cin => (k1, co),
            ref s => {
                return Err(shape_err!(
                    "kernel {s:?} incompatible with input {h}x{w}x{cin} (need odd k x k x {cin} x c_out)"
                ))
            }
        };
        let data = spatial::conv2d_forward(
            self.value(input).data(),
            (h, w, cin),
            self.value(kernel).data(),
            k,
            cout,
            padding,
        );
        let v = Tensor::from_parts(vec![h, w, cout], data);
        Ok(self.push(v, Op::Conv2d { input, kernel, padding }))
    }

    /// Separable depthwise blur with fixed odd-length 1-D taps.
    pub fn blur(&mut self, input: Var, taps: Rc<[f64]>, padding: Padding) -> Result<Var> {
        let dims = self.value(input).hwc()?;
        if taps.len() % 2 == 0 {
            return Err(shape_err!("blur taps must have odd length, got {}", taps.len()));
        }
        let data = spatial::blur_forward(self.value(input).data(), dims, &taps, padding);
        let v = Tensor::from_parts(vec![dims.0, dims.1, dims.2], data);
        Ok(self.push(v, Op::Blur { input, taps, padding }))
    }

    /// Mean of the map over each rectangle, giving an `m x c` matrix.
    pub fn roi_mean_pool(&mut self, input: Var, rects: Rc<[Rect]>) -> Result<Var> {
        let (h, w, c) = self.value(input).hwc()?;
        if rects.is_empty() {
            return Err(shape_err!("roi pooling needs at least one rectangle"));
        }
        if let Some(bad) = rects.iter().find(|r| !r.fits(h, w)) {
            return Err(shape_err!("rectangle {bad:?} outside {h}x{w} map"));
        }
        let data = spatial::roi_mean_forward(self.value(input).data(), (h, w, c), &rects);
        let v = Tensor::from_parts(vec![rects.len(), c], data);
        Ok(self.push(v, Op::RoiMean { input, rects }))
    }

    /// Scales every row of an `m x n` matrix to unit L2 norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (m, n) = expect_rank2(self.value(x), "row_normalize")?;
        let mut data = self.value(x).data().to_vec();
        for (i, row) in data.chunks_exact_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(numerical_err!("row {i} of {m}x{n} matrix has zero or non-finite norm"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::RowNormalize(x)))
    }

    /// Row-wise log-sum-exp of an `m x k` matrix. With `exclude_diag` the
    /// matrix must be square and entry `(i, i)` is left out of row `i`.
    pub fn logsumexp_rows(&mut self, x: Var, exclude_diag: bool) -> Result<Var> {
        let (m, k) = expect_rank2(self.value(x), "logsumexp_rows")?;
        if exclude_diag && (m != k || k < 2) {
            return Err(shape_err!("diagonal exclusion needs a square matrix with >= 2 rows, got {m}x{k}"));
        }
        let data = self.value(x).data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &data[i * k..(i + 1) * k];
                let keep = |j: usize| !(exclude_diag && j == i);
                let mx = (0..k).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..k).filter(|&j| keep(j)).map(|j| (row[j] - mx).exp()).sum();
                mx + s.ln()
            })
            .collect();
        let v = finite_or(Tensor::vector(out), "logsumexp_rows")?;
        Ok(self.push(v, Op::LogSumExpRows { x, exclude_diag }))
    }

    /// Picks entry `(i, cols[i])` of an `m x k` matrix for each row.
    pub fn gather(&mut self, x: Var, cols: Rc<[usize]>) -> Result<Var> {
        let (m, k) = expect_rank2(self.value(x), "gather")?;
        if cols.len() != m || cols.iter().any(|&c| c >= k) {
            return Err(shape_err!("gather indices {cols:?} invalid for {m}x{k} matrix"));
        }
        let data = self.value(x).data();
        let out = cols.iter().enumerate().map(|(i, &c)| data[i * k + c]).collect();
        Ok(self.push(Tensor::vector(out), Op::Gather { x, cols }))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            // leaf gradients stay in place; interior ones are released once propagated
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    acc(&mut grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                    acc(&mut grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b).data();
                    acc(&mut grads, *a, g.iter().zip(bv).map(|(g, b)| g / b).collect());
                    let gb = g.iter().zip(out).zip(bv).map(|((g, y), b)| -g * y / b).collect();
                    acc(&mut grads, *b, gb);
                }
                Op::Unary(x, op) => {
                    let xv = self.value(*x).data();
                    let d: Vec<f64> = match op {
                        Unary::Neg => g.iter().map(|g| -g).collect(),
                        Unary::Relu => g
                            .iter()
                            .zip(xv)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                        Unary::Tanh => g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect(),
                        Unary::Sigmoid => g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
                        Unary::Exp => g.iter().zip(out).map(|(g, y)| g * y).collect(),
                        Unary::Log => g.iter().zip(xv).map(|(g, x)| g / x).collect(),
                        Unary::Sqrt => g.iter().zip(out).map(|(g, y)| 0.5 * g / y).collect(),
                        Unary::Square => g.iter().zip(xv).map(|(g, x)| 2.0 * g * x).collect(),
                        Unary::SmoothL1 => g.iter().zip(xv).map(|(g, x)| g * x.clamp(-1.0, 1.0)).collect(),
                    };
                    acc(&mut grads, *x, d);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, g.iter().map(|g| g * c).collect()),
                Op::Offset(x) => acc(&mut grads, *x, g),
                Op::ScaleBy { scalar, x } => {
                    let s = self.value(*scalar).item();
                    let xv = self.value(*x).data();
                    let gs: f64 = g.iter().zip(xv).map(|(g, x)| g * x).sum();
                    acc(&mut grads, *x, g.iter().map(|g| g * s).collect());
                    acc(&mut grads, *scalar, vec![gs]);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = expect_rank2(self.value(*a), "matmul")?;
                    let n = self.shape(*b)[1];
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    acc(&mut grads, *a, matmul_raw(&g, &bt, m, n, k));
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    acc(&mut grads, *b, matmul_raw(&at, &g, k, m, n));
                }
                Op::Transpose(x) => {
                    let (m, n) = expect_rank2(self.value(*x), "transpose")?;
                    acc(&mut grads, *x, transpose_raw(&g, n, m));
                }
                Op::Reshape(x) => acc(&mut grads, *x, g),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        acc(&mut grads, *p, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, vec![g[0]; n]);
                }
                Op::MeanPoolSpatial(x) => {
                    let (h, w, c) = self.value(*x).hwc()?;
                    let inv = 1.0 / (h * w) as f64;
                    let scaled: Vec<f64> = g.iter().map(|g| g * inv).collect();
                    let d = (0..h * w * c).map(|i| scaled[i % c]).collect();
                    acc(&mut grads, *x, d);
                }
                Op::L2Norm(x) => {
                    let n = out[0];
                    let xv = self.value(*x).data();
                    let d = if n > 0.0 {
                        xv.iter().map(|x| g[0] * x / n).collect()
                    } else {
                        vec![0.0; xv.len()]
                    };
                    acc(&mut grads, *x, d);
                }
                Op::AddBias(x, b) => {
                    let n = self.value(*b).len();
                    let mut gb = vec![0.0; n];
                    for chunk in g.chunks_exact(n) {
                        gb.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                    }
                    acc(&mut grads, *x, g);
                    acc(&mut grads, *b, gb);
                }
                Op::Conv2d { input, kernel, padding } => {
                    let dims = self.value(*input).hwc()?;
                    let ks = self.shape(*kernel);
                    let (k, cout) = (ks[0], ks[3]);
                    let (gi, gk) = spatial::conv2d_backward(
                        self.value(*input).data(),
                        dims,
                        self.value(*kernel).data(),
                        k,
                        cout,
                        *padding,
                        &g,
                    );
                    acc(&mut grads, *input, gi);
                    acc(&mut grads, *kernel, gk);
                }
                Op::Blur { input, taps, padding } => {
                    let dims = self.value(*input).hwc()?;
                    acc(&mut grads, *input, spatial::blur_backward(&g, dims, taps, *padding));
                }
                Op::RoiMean { input, rects } => {
                    let dims = self.value(*input).hwc()?;
                    acc(&mut grads, *input, spatial::roi_mean_backward(&g, dims, rects));
                }
                Op::RowNormalize(x) => {
                    let n = self.shape(*x)[1];
                    let xv = self.value(*x).data();
                    let mut d = vec![0.0; xv.len()];
                    for (i, drow) in d.chunks_exact_mut(n).enumerate() {
                        let xr = &xv[i * n..(i + 1) * n];
                        let yr = &out[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::LogSumExpRows { x, exclude_diag } => {
                    let k = self.shape(*x)[1];
                    let xv = self.value(*x).data();
                    let mut d = vec![0.0; xv.len()];
                    for (i, drow) in d.chunks_exact_mut(k).enumerate() {
                        for j in 0..k {
                            if !(*exclude_diag && i == j) {
                                drow[j] = g[i] * (xv[i * k + j] - out[i]).exp();
                            }
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Gather { x, cols } => {
                    let k = self.shape(*x)[1];
                    let mut d = vec![0.0; self.value(*x).len()];
                    for (i, &c) in cols.iter().enumerate() {
                        d[i * k + c] = g[i];
                    }
                    acc(&mut grads, *x, d);
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }
}

