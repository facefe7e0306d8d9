//! Core tensor algebra on the graph.

use super::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{split_axis, Scalar, Tensor};

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs shape is a suffix of lhs shape and is repeated over the leading dims.
    Suffix,
}

fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        Ok(Broadcast::Same)
    } else if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        Ok(Broadcast::Suffix)
    } else {
        Err(Error::shape(op, lhs, rhs))
    }
}

/// Sum a suffix-broadcast gradient back down to the rhs shape.
fn reduce_suffix<T: Scalar>(grad: &Tensor<T>, rhs_shape: &[usize]) -> Tensor<T> {
    let block: usize = rhs_shape.iter().product();
    let mut out = Tensor::zeros(rhs_shape);
    for chunk in grad.data().chunks_exact(block) {
        for (o, &g) in out.data_mut().iter_mut().zip(chunk) {
            *o = *o + g;
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinaryKind,
    lhs: Var,
    rhs: Var,
    broadcast: Broadcast,
}

impl<T: Scalar> Function<T> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.lhs, self.rhs]
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let rhs_shape = g.shape(self.rhs);
        let (dl, dr_full) = match self.kind {
            BinaryKind::Add => (grad.clone(), grad.clone()),
            BinaryKind::Sub => (grad.clone(), grad.map(|v| -v)),
            BinaryKind::Mul => {
                let a = g.value(self.lhs).data();
                let b = g.value(self.rhs).data();
                let block = b.len();
                let mut dl = grad.clone();
                let mut dr = grad.clone();
                for (i, (l, r)) in dl.data_mut().iter_mut().zip(dr.data_mut()).enumerate() {
                    *l = *l * b[i % block];
                    *r = *r * a[i];
                }
                (dl, dr)
            }
        };
        let dr = match self.broadcast {
            Broadcast::Same => dr_full,
            Broadcast::Suffix => reduce_suffix(&dr_full, rhs_shape),
        };
        vec![Some(dl), Some(dr)]
    }
}

struct Affine {
    input: Var,
    scale: f64,
}

impl<T: Scalar> Function<T> for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let s = T::from_f64(self.scale);
        vec![Some(grad.map(|v| v * s))]
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Exp,
    Sqrt,
    Relu,
    Gelu,
}

struct Unary {
    kind: UnaryKind,
    input: Var,
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inner = T::from_f64(GELU_K) * (x + T::from_f64(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::from_f64(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

impl<T: Scalar> Function<T> for Unary {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Exp => "exp",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Relu => "relu",
            UnaryKind::Gelu => "gelu",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, g: &Graph<T>, out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = g.value(self.input).data();
        let y = out.data();
        let mut d = grad.clone();
        let two = T::from_f64(2.0);
        for (i, dv) in d.data_mut().iter_mut().enumerate() {
            let local = match self.kind {
                UnaryKind::Exp => y[i],
                UnaryKind::Sqrt => T::one() / (two * y[i]),
                UnaryKind::Relu => {
                    if x[i] > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Gelu => gelu_grad(x[i]),
            };
            *dv = *dv * local;
        }
        vec![Some(d)]
    }
}

struct SumAll {
    input: Var,
    mean: bool,
}

impl<T: Scalar> Function<T> for SumAll {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = g.value(self.input);
        let mut v = grad.item();
        if self.mean {
            v = v / T::from_usize(x.numel());
        }
        vec![Some(Tensor::full(x.shape(), v))]
    }
}

struct Reshape {
    input: Var,
}

impl<T: Scalar> Function<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let shape = g.shape(self.input);
        vec![Some(grad.clone().reshape(shape).expect("reshape grad"))]
    }
}

/// Swap the last two axes of every matrix in a batch.
fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let r = x.rank();
    let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    let mut out = Tensor::zeros(&shape);
    let block = rows * cols;
    for (src, dst) in x
        .data()
        .chunks_exact(block)
        .zip(out.data_mut().chunks_exact_mut(block))
    {
        kernels::transpose(rows, cols, src, dst);
    }
    out
}

struct Transpose {
    input: Var,
}

impl<T: Scalar> Function<T> for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(transpose_last2(grad))]
    }
}

/// Concatenate tensors along `axis`. All other extents must agree.
pub fn concat_forward<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(Error::invalid("concat", format!("axis {axis} out of range")));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let mut a = p.shape().to_vec();
        let mut b = first.shape().to_vec();
        if a.len() != b.len() {
            return Err(Error::shape("concat", p.shape(), first.shape()));
        }
        a[axis] = 0;
        b[axis] = 0;
        if a != b {
            return Err(Error::shape("concat", p.shape(), first.shape()));
        }
        shape[axis] += p.shape()[axis];
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(&shape, data)
}

struct Concat {
    inputs: Vec<Var>,
    axis: usize,
}

impl<T: Scalar> Function<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }

    fn backward(&self, g: &Graph<T>, out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (outer, total, inner) = split_axis(out.shape(), self.axis);
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.inputs.len());
        for &v in &self.inputs {
            let shape = g.shape(v);
            let extent = shape[self.axis];
            let mut d = Tensor::zeros(shape);
            let block = extent * inner;
            for o in 0..outer {
                let src = &grad.data()[(o * total + offset) * inner..][..block];
                d.data_mut()[o * block..(o + 1) * block].copy_from_slice(src);
            }
            offset += extent;
            grads.push(Some(d));
        }
        grads
    }
}

struct Slice {
    input: Var,
    axis: usize,
    start: usize,
}

impl<T: Scalar> Function<T> for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, g: &Graph<T>, out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let shape = g.shape(self.input);
        let (outer, extent, inner) = split_axis(shape, self.axis);
        let len = out.shape()[self.axis];
        let mut d = Tensor::zeros(shape);
        for o in 0..outer {
            let dst = &mut d.data_mut()[(o * extent + self.start) * inner..][..len * inner];
            dst.copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
        }
        vec![Some(d)]
    }
}

/// Batched matrix product; `b` is either shared (`K×N`) or batched like `a`.
struct Matmul {
    a: Var,
    b: Var,
    shared_rhs: bool,
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::shape("matmul", a, b));
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared_rhs = if b.len() == 2 {
        true
    } else if a[..a.len() - 2] == b[..b.len() - 2] {
        false
    } else {
        return Err(Error::shape("matmul", a, b));
    };
    Ok(MatmulDims {
        batch,
        m,
        k,
        n,
        shared_rhs,
    })
}

impl<T: Scalar> Function<T> for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let a = g.value(self.a);
        let b = g.value(self.b);
        let d = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
        debug_assert_eq!(d.shared_rhs, self.shared_rhs);
        let (m, k, n) = (d.m, d.k, d.n);

        let da = g.requires_grad(self.a).then(|| {
            let mut da = Tensor::zeros(a.shape());
            for bi in 0..d.batch {
                let bm = if d.shared_rhs { b.data() } else { &b.data()[bi * k * n..(bi + 1) * k * n] };
                kernels::gemm_nt(
                    m,
                    n,
                    k,
                    &grad.data()[bi * m * n..(bi + 1) * m * n],
                    bm,
                    &mut da.data_mut()[bi * m * k..(bi + 1) * m * k],
                );
            }
            da
        });
        let db = g.requires_grad(self.b).then(|| {
            let mut db = Tensor::zeros(b.shape());
            for bi in 0..d.batch {
                let dst = if d.shared_rhs {
                    db.data_mut()
                } else {
                    &mut db.data_mut()[bi * k * n..(bi + 1) * k * n]
                };
                kernels::gemm_tn(
                    k,
                    m,
                    n,
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &grad.data()[bi * m * n..(bi + 1) * m * n],
                    dst,
                );
            }
            db
        });
        vec![da, db]
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..extent {
                max = max.max(src[base + a * inner]);
            }
            let mut total = T::zero();
            for a in 0..extent {
                let e = (src[base + a * inner] - max).exp();
                dst[base + a * inner] = e;
                total = total + e;
            }
            for a in 0..extent {
                dst[base + a * inner] = dst[base + a * inner] / total;
            }
        }
    }
    out
}

struct Softmax {
    input: Var,
    axis: usize,
}

impl<T: Scalar> Function<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _g: &Graph<T>, out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (outer, extent, inner) = split_axis(out.shape(), self.axis);
        let y = out.data();
        let dy = grad.data();
        let mut dx = Tensor::zeros(out.shape());
        let d = dx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut dot = T::zero();
                for a in 0..extent {
                    dot = dot + y[base + a * inner] * dy[base + a * inner];
                }
                for a in 0..extent {
                    let idx = base + a * inner;
                    d[idx] = y[idx] * (dy[idx] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// `x · W + b` over the last axis; `W` is `in×out`.
struct Linear {
    x: Var,
    w: Var,
    b: Option<Var>,
}

impl<T: Scalar> Function<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, g: &Graph<T>, _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = g.value(self.x);
        let w = g.value(self.w);
        let (fin, fout) = (w.shape()[0], w.shape()[1]);
        let rows = x.numel() / fin;
        let dx = g.requires_grad(self.x).then(|| {
            let mut dx = Tensor::zeros(x.shape());
            kernels::gemm_nt(rows, fout, fin, grad.data(), w.data(), dx.data_mut());
            dx
        });
        let dw = g.requires_grad(self.w).then(|| {
            let mut dw = Tensor::zeros(w.shape());
            kernels::gemm_tn(fin, rows, fout, x.data(), grad.data(), dw.data_mut());
            dw
        });
        let mut out = vec![dx, dw];
        if let Some(b) = self.b {
            out.push(Some(reduce_suffix(grad, g.shape(b))));
        }
        out
    }
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, kind: BinaryKind, op: &'static str, lhs: Var, rhs: Var) -> Result<Var> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        let broadcast = broadcast_kind(op, a.shape(), b.shape())?;
        let block = b.numel();
        let bd = b.data();
        let data: Vec<T> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % block];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(a.shape(), data)?;
        Ok(self.record(
            value,
            Box::new(Binary {
                kind,
                lhs,
                rhs,
                broadcast,
            }),
        ))
    }

    /// Elementwise `lhs + rhs`; `rhs` may broadcast over leading dims of `lhs`.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", lhs, rhs)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", lhs, rhs)
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", lhs, rhs)
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        let value = self.value(x).map(|v| s * v + t);
        self.record(value, Box::new(Affine { input: x, scale }))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, shift: f64) -> Var {
        self.affine(x, 1.0, shift)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| match kind {
            UnaryKind::Exp => v.exp(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::Gelu => gelu(v),
        });
        self.record(value, Box::new(Unary { kind, input: x }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    /// GeLU, tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(value, Box::new(SumAll { input: x, mean: false }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::from_usize(t.numel()));
        self.record(value, Box::new(SumAll { input: x, mean: true }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.record(value, Box::new(Reshape { input: x })))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::invalid("transpose", format!("rank {} < 2", t.rank())));
        }
        let value = transpose_last2(t);
        Ok(self.record(value, Box::new(Transpose { input: x })))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let value = concat_forward(&parts, axis)?;
        Ok(self.record(
            value,
            Box::new(Concat {
                inputs: xs.to_vec(),
                axis,
            }),
        ))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] || len == 0 {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, extent, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * extent + start) * inner..][..len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.record(value, Box::new(Slice { input: x, axis, start })))
    }

    /// `a[..., M, K] · b[K, N]` or batched `a[B.., M, K] · b[B.., K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = matmul_dims(ta.shape(), tb.shape())?;
        let mut shape = ta.shape().to_vec();
        let r = shape.len();
        shape[r - 1] = d.n;
        let mut out = Tensor::zeros(&shape);
        let (m, k, n) = (d.m, d.k, d.n);
        for bi in 0..d.batch {
            let bm = if d.shared_rhs {
                tb.data()
            } else {
                &tb.data()[bi * k * n..(bi + 1) * k * n]
            };
            kernels::gemm_nn(
                m,
                k,
                n,
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                bm,
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
            );
        }
        Ok(self.record(
            out,
            Box::new(Matmul {
                a,
                b,
                shared_rhs: d.shared_rhs,
            }),
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for {:?}", t.shape()),
            ));
        }
        let value = softmax_forward(t, axis);
        Ok(self.record(value, Box::new(Softmax { input: x, axis })))
    }

    /// `x · W + b` applied over the last axis of `x`; `W` is `in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.rank() != 2 || tx.shape().last() != Some(&tw.shape()[0]) {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let (fin, fout) = (tw.shape()[0], tw.shape()[1]);
        let rows = tx.numel() / fin;
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = fout;
        let mut out = Tensor::zeros(&shape);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [fout] {
                return Err(Error::shape("linear", tb.shape(), &[fout]));
            }
            for row in out.data_mut().chunks_exact_mut(fout) {
                row.copy_from_slice(tb.data());
            }
        }
        kernels::gemm_nn(rows, fin, fout, tx.data(), tw.data(), out.data_mut());
        Ok(self.record(out, Box::new(Linear { x, w, b })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let c = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);

        let p = g.constant(t(&[2, 2], &[1., 0., 0., 0.]));
        let n = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = g.matmul(p, n).unwrap();
        assert_eq!(g.value(c).data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_example() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[3., 4.]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[2], &[1000., 0.]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);

        let x = g.constant(t(&[2], &[std::f64::consts::LN_2, 0.]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn relu_and_linear_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0., 0., 2.]);

        let x = g.constant(t(&[2, 2], &[1., -2., 3., 4.]));
        let w = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1., -2., 3., 4.]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[1, 1, 2], &[5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 3, 2]);
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4., 5., 6.]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s).data(), &[5., 6.]);
    }

    #[test]
    fn suffix_broadcast_add() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2, 3], &[0.; 6]));
        let b = g.param(t(&[3], &[1., 2., 3.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 1., 2., 3.]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2., 2., 2.]);
        let bad = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, bad).is_err());
    }
}
