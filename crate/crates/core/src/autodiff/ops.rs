//! Elementwise, reduction and shape operations on tape variables.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::tensor::{broadcast_map, broadcast_shape, reduce_to, strides};
use super::{Tensor, Var};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Softplus,
    LeakyRelu(Real),
    Abs,
    Square,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    L1,
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
pub fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_forward(kind: UnaryKind, x: Real) -> Real {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Exp => x.exp(),
        UnaryKind::Ln => x.ln(),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt => x.sqrt(),
    }
}

/// Derivative given input `x` and output `y`.
fn unary_derivative(kind: UnaryKind, x: Real, y: Real) -> Real {
    match kind {
        UnaryKind::Neg => -1.0,
        UnaryKind::Exp => y,
        UnaryKind::Ln => 1.0 / x,
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Sqrt => 0.5 / y,
    }
}

impl<'t> Var<'t> {
    pub fn binary(self, kind: BinaryKind, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::Shape(format!(
                "cannot broadcast {:?} with {:?}",
                a.shape(),
                b.shape()
            ))
        })?;
        let ma = Rc::new(broadcast_map(a.shape(), &out_shape));
        let mb = Rc::new(broadcast_map(b.shape(), &out_shape));
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<Real> = ma
            .iter()
            .zip(mb.iter())
            .map(|(&i, &j)| match kind {
                BinaryKind::Add => ad[i] + bd[j],
                BinaryKind::Sub => ad[i] - bd[j],
                BinaryKind::Mul => ad[i] * bd[j],
                BinaryKind::Div => ad[i] / bd[j],
            })
            .collect();
        let out = Tensor::from_parts(out_shape.clone(), data);
        let (a_req, b_req) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape().record(out, &[self, other], move |g| {
            let gd = g.data();
            let ga = a_req.then(|| {
                let full: Vec<Real> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                    BinaryKind::Mul => gd.iter().zip(mb.iter()).map(|(g, &j)| g * b.data()[j]).collect(),
                    BinaryKind::Div => gd.iter().zip(mb.iter()).map(|(g, &j)| g / b.data()[j]).collect(),
                };
                reduce_to(&Tensor::from_parts(out_shape.clone(), full), a.shape())
            });
            let gb = b_req.then(|| {
                let full: Vec<Real> = match kind {
                    BinaryKind::Add => gd.to_vec(),
                    BinaryKind::Sub => gd.iter().map(|g| -g).collect(),
                    BinaryKind::Mul => gd.iter().zip(ma.iter()).map(|(g, &i)| g * a.data()[i]).collect(),
                    BinaryKind::Div => gd
                        .iter()
                        .zip(ma.iter().zip(mb.iter()))
                        .map(|(g, (&i, &j))| {
                            let bv = b.data()[j];
                            -g * a.data()[i] / (bv * bv)
                        })
                        .collect(),
                };
                reduce_to(&Tensor::from_parts(out_shape.clone(), full), b.shape())
            });
            vec![ga, gb]
        }))
    }

    pub fn try_add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn try_sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn try_mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn try_div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Div, other)
    }

    pub fn unary(self, kind: UnaryKind) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| unary_forward(kind, v));
        let y = Rc::new(out.clone());
        self.tape().record(out, &[self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(g, (&xv, &yv))| g * unary_derivative(kind, xv, yv))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryKind::Ln)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn leaky_relu(self, slope: Real) -> Var<'t> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryKind::Sqrt)
    }

    /// Multiply by a constant.
    pub fn scale(self, c: Real) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.tape()
            .record(out, &[self], move |g| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(self, c: Real) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape().record(out, &[self], |g| vec![Some(g.clone())])
    }

    /// max(x, floor); the gradient is zero at and below the floor.
    pub fn clamp_min(self, floor: Real) -> Var<'t> {
        self.clamp(floor, Real::INFINITY)
    }

    /// Clamp into [lo, hi]; zero gradient where clamped.
    pub fn clamp(self, lo: Real, hi: Real) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(lo).min(hi));
        self.tape().record(out, &[self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &v)| if v > lo && v < hi { *g } else { 0.0 })
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    /// Replace entries where `mask` is set by `fill`; those entries get no gradient.
    pub fn fill_where(self, mask: &[bool], fill: Real) -> Var<'t> {
        let x = self.value();
        assert_eq!(mask.len(), x.numel());
        let mask: Rc<Vec<bool>> = Rc::new(mask.to_vec());
        let data = x
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.tape().record(out, &[self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&g, &m)| if m { 0.0 } else { g })
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    /// Reduce over the given axes (all axes when empty). Reduced axes are
    /// removed; reducing everything yields shape `[1]`.
    pub fn reduce(self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::Shape(format!(
                    "axis {} out of range for {:?}",
                    ax, shape
                )));
            }
        }
        let reduce_all = axes.is_empty();
        let keep: Vec<bool> = (0..shape.len())
            .map(|d| !reduce_all && !axes.contains(&d))
            .collect();
        let kept_shape: Vec<usize> = shape.iter().zip(&keep).map(|(&d, &k)| if k { d } else { 1 }).collect();
        let mut out_shape: Vec<usize> = shape.iter().zip(&keep).filter(|(_, &k)| k).map(|(&d, _)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let count = (x.numel() / kept_shape.iter().product::<usize>()).max(1) as Real;
        let map = Rc::new(broadcast_map(&kept_shape, &shape));
        let mut acc = vec![0.0; kept_shape.iter().product()];
        for (&v, &m) in x.data().iter().zip(map.iter()) {
            acc[m] += match kind {
                ReduceKind::L1 => v.abs(),
                _ => v,
            };
        }
        if kind == ReduceKind::Mean {
            acc.iter_mut().for_each(|v| *v /= count);
        }
        let out = Tensor::from_parts(out_shape, acc);
        Ok(self.tape().record(out, &[self], move |g| {
            let gd = g.data();
            let data = x
                .data()
                .iter()
                .zip(map.iter())
                .map(|(&v, &m)| match kind {
                    ReduceKind::Sum => gd[m],
                    ReduceKind::Mean => gd[m] / count,
                    ReduceKind::L1 => {
                        let s = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gd[m] * s
                    }
                })
                .collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
        }))
    }

    pub fn sum(self) -> Var<'t> {
        self.reduce(ReduceKind::Sum, &[]).expect("full reduction")
    }

    pub fn mean(self) -> Var<'t> {
        self.reduce(ReduceKind::Mean, &[]).expect("full reduction")
    }

    pub fn l1_norm(self) -> Var<'t> {
        self.reduce(ReduceKind::L1, &[]).expect("full reduction")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let src_shape = x.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g| {
            vec![Some(Tensor::from_parts(src_shape.clone(), g.data().to_vec()))]
        }))
    }

    /// Contiguous run of `len` values starting at flat offset `start`,
    /// returned with shape `shape`.
    pub fn slice_flat(self, start: usize, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let len: usize = shape.iter().product();
        if start + len > x.numel() {
            return Err(Error::Shape(format!(
                "slice [{}, {}) exceeds {} values",
                start,
                start + len,
                x.numel()
            )));
        }
        let out = Tensor::from_parts(shape.to_vec(), x.data()[start..start + len].to_vec());
        let src_shape = x.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g| {
            let mut full = Tensor::zeros(&src_shape);
            full.data_mut()[start..start + len].copy_from_slice(g.data());
            vec![Some(full)]
        }))
    }

    /// Rows `[start, start + len)` along axis 0.
    pub fn narrow(self, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if start + len > shape[0] {
            return Err(Error::Shape(format!(
                "narrow [{}, {}) on axis of size {}",
                start,
                start + len,
                shape[0]
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        self.slice_flat(start * inner, &out_shape)
    }

    /// Matrix transpose of a 2D variable.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[m, n] = x.shape() else {
            return Err(Error::Shape(format!("transpose needs 2D, got {:?}", x.shape())));
        };
        let out = transpose_data(x.data(), m, n);
        Ok(self
            .tape()
            .record(Tensor::from_parts(vec![n, m], out), &[self], move |g| {
                vec![Some(Tensor::from_parts(vec![m, n], transpose_data(g.data(), n, m)))]
            }))
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` variable.
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[c, h, w] = x.shape() else {
            return Err(Error::Shape(format!("upsample needs [C,H,W], got {:?}", x.shape())));
        };
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[(ch * h2 + i) * w2 + j] = x.data()[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self
            .tape()
            .record(Tensor::from_parts(vec![c, h2, w2], out), &[self], move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            gx[(ch * h + i / 2) * w + j / 2] += g.data()[(ch * h2 + i) * w2 + j];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }))
    }
}

/// Concatenate along axis 0; trailing dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let tail = first.shape()[1..].to_vec();
    let mut shapes = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for p in parts {
        let v = p.value();
        if v.shape().len() != tail.len() + 1 || v.shape()[1..] != tail[..] {
            return Err(Error::Shape(format!(
                "concat trailing dims {:?} vs {:?}",
                &v.shape()[1..],
                tail
            )));
        }
        shapes.push(v.shape().to_vec());
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![shapes.iter().map(|s| s[0]).sum()];
    shape.extend_from_slice(&tail);
    let tape = first.tape();
    Ok(tape.record(Tensor::from_parts(shape, data), parts, move |g| {
        let mut off = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let part = Tensor::from_parts(s.clone(), g.data()[off..off + n].to_vec());
                off += n;
                Some(part)
            })
            .collect()
    }))
}

pub(crate) fn transpose_data(data: &[Real], m: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

/// Permute axes of a plain tensor (no tape).
pub fn permute(t: &Tensor, order: &[usize]) -> Tensor {
    let shape = t.shape();
    let new_shape: Vec<usize> = order.iter().map(|&o| shape[o]).collect();
    let src_strides = strides(shape);
    let n = new_shape.len();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; n];
    for _ in 0..t.numel() {
        let off: usize = (0..n).map(|d| idx[d] * src_strides[order[d]]).sum();
        out.push(t.data()[off]);
        for d in (0..n).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(new_shape, out)
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $kind:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                match self.binary($kind, rhs) {
                    Ok(v) => v,
                    Err(e) => panic!("{}", e),
                }
            }
        }
    };
}

impl_binop!(Add, add, BinaryKind::Add);
impl_binop!(Sub, sub, BinaryKind::Sub);
impl_binop!(Mul, mul, BinaryKind::Mul);
impl_binop!(Div, div, BinaryKind::Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }
}
